"""Tile ingestion, tissue masking, patch extraction and Lanczos 20x -> 40x translation."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Protocol

import numpy as np

from . import _io
from .errors import InputError

PATCH_SIZE = 512
MAGNIFICATIONS = ("20x", "40x")
MANIFEST_COLUMNS = ("slide_id", "patch_id", "path", "x", "y", "magnification")


@dataclass
class Patch:
    slide_id: str
    patch_id: str
    x: int
    y: int
    magnification: str
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.magnification not in MAGNIFICATIONS:
            raise InputError(f"unknown magnification {self.magnification!r}")
        px = self.pixels
        if px.shape != (PATCH_SIZE, PATCH_SIZE, 3) or px.dtype != np.uint8:
            raise InputError(
                f"patch {self.patch_id}: expected {PATCH_SIZE}x{PATCH_SIZE}x3 uint8, "
                f"got {px.shape} {px.dtype}"
            )

    def with_pixels(self, pixels: np.ndarray) -> "Patch":
        return Patch(self.slide_id, self.patch_id, self.x, self.y, self.magnification, pixels)

    @property
    def filename(self) -> str:
        return f"{self.patch_id}.png"


def patch_name(slide_id: str, x: int, y: int, magnification: str) -> str:
    return f"{slide_id}_{x}_{y}_{magnification}"


# --------------------------------------------------------------------------
# tissue mask
# --------------------------------------------------------------------------


@dataclass
class TissueMask:
    grid: np.ndarray
    tissue_fraction: np.ndarray
    threshold: int
    min_tissue_fraction: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def n_tissue(self) -> int:
        return int(self.grid.sum())


def saturation_levels(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation quantized to 0..255."""
    rgb = np.asarray(rgb, dtype=np.float64)
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    sat = np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)
    return np.floor(sat * 255.0 + 0.5).astype(np.int64)


def otsu_threshold(levels: np.ndarray) -> int:
    """Otsu threshold over integer levels 0..255.

    Pixels with level > threshold form the foreground class. Ties (including
    the single-level case) resolve to the lowest threshold.
    """
    hist = np.bincount(np.asarray(levels).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    if total == 0:
        raise InputError("empty raster")
    bins = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * bins)
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(between))


def _cell_edges(n: int, cells: int) -> np.ndarray:
    return (np.arange(cells + 1) * n) // cells


def build_tissue_mask(
    thumbnail: np.ndarray,
    min_tissue_fraction: float = 0.5,
    grid_shape: tuple[int, int] | None = None,
) -> TissueMask:
    """Mark grid cells whose saturated-pixel fraction reaches ``min_tissue_fraction``.

    ``grid_shape`` (rows, cols) partitions the thumbnail into the patch grid;
    by default every thumbnail pixel is one cell.
    """
    thumbnail = np.asarray(thumbnail)
    if thumbnail.ndim != 3 or thumbnail.shape[2] != 3 or thumbnail.size == 0:
        raise InputError("thumbnail must be a nonempty HxWx3 raster")
    if not 0 < min_tissue_fraction <= 1:
        raise InputError("min_tissue_fraction must lie in (0, 1]")
    h, w = thumbnail.shape[:2]
    rows, cols = grid_shape if grid_shape is not None else (h, w)
    if not (0 < rows <= h and 0 < cols <= w):
        raise InputError(f"grid {rows}x{cols} does not fit a {h}x{w} thumbnail")

    levels = saturation_levels(thumbnail)
    t = otsu_threshold(levels)
    tissue = (levels > t).astype(np.float64)

    ye, xe = _cell_edges(h, rows), _cell_edges(w, cols)
    # summed-area table gives per-cell counts independent of traversal order
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = tissue.cumsum(0).cumsum(1)
    counts = sat[ye[1:, None], xe[None, 1:]] - sat[ye[:-1, None], xe[None, 1:]] \
        - sat[ye[1:, None], xe[None, :-1]] + sat[ye[:-1, None], xe[None, :-1]]
    areas = np.diff(ye)[:, None] * np.diff(xe)[None, :]
    frac = counts / areas
    return TissueMask(frac >= min_tissue_fraction, frac, t, min_tissue_fraction)


# --------------------------------------------------------------------------
# tile sources and extraction
# --------------------------------------------------------------------------


class TileSource(Protocol):
    slide_id: str
    magnification: str

    @property
    def grid_shape(self) -> tuple[int, int]: ...

    def read_tile(self, row: int, col: int) -> np.ndarray: ...


class ArrayTileSource:
    """A slide held in memory as one large RGB array."""

    def __init__(self, slide_id: str, pixels: np.ndarray, magnification: str = "20x"):
        self.slide_id = slide_id
        self.pixels = pixels
        self.magnification = magnification

    @property
    def grid_shape(self):
        return self.pixels.shape[0] // PATCH_SIZE, self.pixels.shape[1] // PATCH_SIZE

    def read_tile(self, row, col):
        s = PATCH_SIZE
        return self.pixels[row * s:(row + 1) * s, col * s:(col + 1) * s]


class ManifestTileSource:
    """Tiles of one slide listed in a manifest; grid position is ``(y, x) // 512``.

    With ``cache=True`` tiles decoded for the thumbnail are kept until
    their first ``read_tile``, so extraction does not decode them twice.
    Tiles the thumbnail could not decode are listed in ``unreadable``.
    """

    def __init__(self, slide_id: str, rows: list[dict], root: Path | str = ".", cache: bool = False):
        if not rows:
            raise InputError(f"slide {slide_id} has no tiles")
        self.slide_id = slide_id
        self.root = Path(root)
        mags = {r["magnification"] for r in rows}
        if len(mags) != 1:
            raise InputError(f"slide {slide_id} mixes magnifications {sorted(mags)}")
        self.magnification = mags.pop()
        self.tiles = {}
        self._cache = {} if cache else None
        self.unreadable: dict[tuple[int, int], str] = {}
        for r in rows:
            x, y = int(r["x"]), int(r["y"])
            if x % PATCH_SIZE or y % PATCH_SIZE:
                raise InputError(f"tile {r['patch_id']} offset ({x},{y}) is off the {PATCH_SIZE}-px grid")
            self.tiles[(y // PATCH_SIZE, x // PATCH_SIZE)] = r

    @property
    def grid_shape(self):
        return (max(r for r, _ in self.tiles) + 1, max(c for _, c in self.tiles) + 1)

    def tile_path(self, row, col) -> Path:
        try:
            rec = self.tiles[(row, col)]
        except KeyError:
            raise FileNotFoundError(f"no tile at grid cell ({row}, {col})") from None
        path = Path(rec["path"])
        return path if path.is_absolute() else self.root / path

    def read_tile(self, row, col):
        path = self.tile_path(row, col)
        if self._cache is not None and (row, col) in self._cache:
            return self._cache.pop((row, col))
        return _io.read_rgb(path)

    def thumbnail(self, scale: int = 16) -> np.ndarray:
        """Block-averaged mosaic; absent or unreadable tiles render white."""
        if PATCH_SIZE % scale:
            raise InputError("thumbnail scale must divide the patch size")
        cell = PATCH_SIZE // scale
        rows, cols = self.grid_shape
        thumb = np.full((rows * cell, cols * cell, 3), 255, dtype=np.uint8)
        for (r, c) in self.tiles:
            try:
                tile = self.read_tile(r, c)
            except (OSError, ValueError) as exc:
                self.unreadable[(r, c)] = str(exc)
                continue
            if tile.shape != (PATCH_SIZE, PATCH_SIZE, 3):
                self.unreadable[(r, c)] = f"tile shape {tile.shape} is not {PATCH_SIZE}x{PATCH_SIZE} RGB"
                continue
            if self._cache is not None:
                self._cache[(r, c)] = tile
            small = tile.reshape(cell, scale, cell, scale, 3).mean(axis=(1, 3))
            thumb[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = np.round(small)
        return thumb


class PatchError(NamedTuple):
    slide_id: str
    row: int
    col: int
    message: str


def extract_patches(
    source: TileSource, mask: TissueMask, errors: list | None = None
) -> Iterator[Patch]:
    """Yield one Patch per true mask cell in row-major order.

    Tiles that fail to read are recorded in ``errors`` (when given) and skipped.
    """
    if tuple(mask.shape) != tuple(source.grid_shape):
        raise InputError(f"mask grid {mask.shape} does not match tile grid {source.grid_shape}")
    for row, col in zip(*np.nonzero(mask.grid)):
        row, col = int(row), int(col)
        x, y = col * PATCH_SIZE, row * PATCH_SIZE
        try:
            px = np.asarray(source.read_tile(row, col), dtype=np.uint8)
            yield Patch(source.slide_id, patch_name(source.slide_id, x, y, source.magnification),
                        x, y, source.magnification, px)
        except (OSError, ValueError) as exc:
            if errors is not None:
                errors.append(PatchError(source.slide_id, row, col, str(exc)))


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: manifest lacks columns {sorted(missing)}")
        return list(reader)


def write_manifest(path, rows) -> None:
    with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# Lanczos resampling
# --------------------------------------------------------------------------


def lanczos_kernel(x, a: int = 3):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


@functools.lru_cache(maxsize=16)
def lanczos_weights(n_in: int, n_out: int, a: int = 3) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix with clamp-to-edge borders.

    Rows are normalized to sum to one so constant signals are reproduced.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = a * stretch
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    taps = first[:, None] + np.arange(int(math.ceil(2 * support)) + 1)[None, :]
    w = lanczos_kernel((centers[:, None] - taps) / stretch, a)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    rows = np.broadcast_to(np.arange(n_out)[:, None], taps.shape)
    np.add.at(m, (rows, np.clip(taps, 0, n_in - 1)), w)
    m.flags.writeable = False
    return m


def lanczos_resample(img: np.ndarray, out_shape: tuple[int, int], a: int = 3) -> np.ndarray:
    """Separable Lanczos resampling; returns unrounded float64."""
    img = np.asarray(img, dtype=np.float64)
    my = lanczos_weights(img.shape[0], out_shape[0], a)
    mx = lanczos_weights(img.shape[1], out_shape[1], a)
    tmp = np.tensordot(my, img, axes=(1, 0))
    out = np.tensordot(tmp, mx, axes=(1, 1))
    # tensordot moves the resampled column axis last
    return np.moveaxis(out, -1, 1) if img.ndim == 3 else out


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(x: np.ndarray) -> np.ndarray:
    # clipping first is equivalent: everything below zero lands on 0 either way
    out = np.clip(x, 0.0, 255.0)
    out += 0.5
    return np.floor(out, out=out).astype(np.uint8)


def upscale_to_40x(p: Patch) -> list[Patch]:
    """Zoom a 20x patch by two and cut it into four 40x quadrants (TL, TR, BL, BR)."""
    if p.magnification != "20x":
        raise InputError(f"patch {p.patch_id} is {p.magnification}; expected 20x")
    s = PATCH_SIZE
    big = to_uint8(lanczos_resample(p.pixels, (2 * s, 2 * s)))
    out = []
    for q in range(4):
        r, c = divmod(q, 2)
        out.append(Patch(
            p.slide_id, f"{p.patch_id}_q{q}", 2 * p.x + c * s, 2 * p.y + r * s, "40x",
            np.ascontiguousarray(big[r * s:(r + 1) * s, c * s:(c + 1) * s]),
        ))
    return out
