"""Per-nucleus morphometry from label masks and patch-level 75-feature aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from . import _io
from .delaunay import merge_duplicates, neighbor_distances, triangulate
from .errors import InputError

MIN_AREA = 10
N_BINS = 10

MORPHOLOGY = ("minor_axis", "major_axis", "axis_ratio", "area", "perimeter",
              "circularity", "eccentricity", "solidity")
INTENSITY = ("mean_r", "mean_g", "mean_b")
SPATIAL = ("min_dist", "max_dist", "mean_dist", "degree")
STATS = ("mean", "std", "entropy", "skewness", "kurtosis")

GROUPS = {"morph": MORPHOLOGY, "int": INTENSITY, "spat": SPATIAL}
_SHORT = {"mean_r": "red", "mean_g": "green", "mean_b": "blue"}
PER_NUCLEUS = MORPHOLOGY + INTENSITY + SPATIAL
FEATURE_NAMES = tuple(
    f"{group}_{_SHORT.get(f, f)}_{stat}"
    for group, feats in GROUPS.items() for f in feats for stat in STATS
)
N_FEATURES = len(FEATURE_NAMES)

# column slices of the 75-vector, in FEATURE_NAMES order
GROUP_SLICES = {
    "morph": slice(0, 40),
    "int": slice(40, 55),
    "spat": slice(55, 75),
}

CONVENTIONS = {
    "histogram_bins": N_BINS,
    "histogram_range": "per-patch min-max; degenerate range puts all mass in bin 0",
    "entropy_log": "natural",
    "kurtosis": "non-excess (Pearson)",
    "zero_spread": "skewness = kurtosis = 0 when std = 0",
    "axis_length": "4*sqrt(eigenvalue) of pixel-coordinate covariance (+1/12 per axis)",
    "perimeter": "Moore boundary trace, Vossepoel-Smeulders corner-corrected chain length",
    "min_area_px": MIN_AREA,
}


@dataclass
class NucleusRecord:
    nucleus_id: int
    centroid: tuple[float, float]
    minor_axis: float
    major_axis: float
    axis_ratio: float
    area: float
    perimeter: float
    circularity: float
    eccentricity: float
    solidity: float
    mean_r: float
    mean_g: float
    mean_b: float
    min_dist: float = 0.0
    max_dist: float = 0.0
    mean_dist: float = 0.0
    degree: int = 0
    spatial_degenerate: bool = False

    def feature_values(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PER_NUCLEUS], dtype=np.float64)


@dataclass
class PatchFeatureVector:
    patch_id: str
    values: np.ndarray
    n_nuclei: int
    slide_id: str = ""
    magnification: str = ""

    def group(self, name: str) -> np.ndarray:
        return self.values[GROUP_SLICES[name]]


# --------------------------------------------------------------------------
# boundary and shape helpers
# --------------------------------------------------------------------------

# chain code 0..7 counter-clockwise from east, as (drow, dcol)
_STEPS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def trace_boundary(region: np.ndarray) -> list[int]:
    """Chain code of the outer 8-connected boundary of the component holding the
    first foreground pixel in raster order."""
    padded = np.pad(region.astype(bool), 1)
    rows, cols = np.nonzero(padded)
    if rows.size == 0:
        return []
    start = (int(rows[0]), int(cols[0]))
    cur, direction = start, 7
    moves: list[int] = []
    limit = 4 * rows.size + 16
    while len(moves) <= limit:
        first = (direction + 7) % 8 if direction % 2 == 0 else (direction + 6) % 8
        for k in range(8):
            d = (first + k) % 8
            nr, nc = cur[0] + _STEPS[d][0], cur[1] + _STEPS[d][1]
            if padded[nr, nc]:
                break
        else:
            return []
        if cur == start and moves and d == moves[0]:
            break
        moves.append(d)
        cur, direction = (nr, nc), d
    return moves


def chain_length(moves: Sequence[int]) -> float:
    """Vossepoel-Smeulders corner-corrected length of a closed chain."""
    if not moves:
        return 0.0
    n_odd = sum(m % 2 for m in moves)
    n_even = len(moves) - n_odd
    n_corner = sum(1 for a, b in zip(moves, moves[1:] + moves[:1]) if a != b)
    return 0.980 * n_even + 1.406 * n_odd - 0.091 * n_corner


def region_perimeter(region: np.ndarray) -> float:
    comps, n = ndimage.label(region, structure=np.ones((3, 3)))
    return sum(chain_length(trace_boundary(comps == k)) for k in range(1, n + 1))


def pixel_hull_area(rows: np.ndarray, cols: np.ndarray) -> float:
    """Area of the convex hull of the union of the given unit pixel squares."""
    order = np.lexsort((cols, rows))
    r, c = rows[order], cols[order]
    first = np.r_[True, r[1:] != r[:-1]]
    last = np.r_[r[1:] != r[:-1], True]
    lr, lc, rr, rc = r[first], c[first], r[last], c[last] + 1
    corners = np.concatenate([
        np.c_[lc, lr], np.c_[lc, lr + 1], np.c_[rc, rr], np.c_[rc, rr + 1],
    ]).astype(np.float64)
    corners = np.unique(corners, axis=0)
    try:
        return float(ConvexHull(corners).volume)
    except Exception:
        return float(rows.size)


# --------------------------------------------------------------------------
# extraction
# --------------------------------------------------------------------------


def extract_nuclei(patch, mask, min_area: int = MIN_AREA, report: dict | None = None):
    """Moment-ellipse morphometry and colour means for every labelled nucleus.

    Labels smaller than ``min_area`` pixels are skipped and counted in
    ``report["skipped_small"]`` when a report dict is supplied.
    """
    px = np.asarray(getattr(patch, "pixels", patch))
    mask = np.asarray(mask)
    if mask.shape != px.shape[:2]:
        raise InputError(f"mask shape {mask.shape} does not match patch {px.shape[:2]}")
    if (mask < 0).any():
        raise InputError("mask labels must be non-negative")
    records = []
    skipped = 0
    for label, box in enumerate(ndimage.find_objects(mask.astype(np.int64)), start=1):
        if box is None:
            continue
        region = mask[box] == label
        rr, cc = np.nonzero(region)
        area = rr.size
        if area < min_area:
            skipped += 1
            continue
        y = rr + box[0].start
        x = cc + box[1].start
        cov = np.cov(np.vstack([x, y]), bias=True) + np.eye(2) / 12.0
        lo, hi = np.linalg.eigvalsh(cov)
        major, minor = 4.0 * math.sqrt(hi), 4.0 * math.sqrt(lo)
        perimeter = region_perimeter(region)
        circ = min(1.0, 4.0 * math.pi * area / perimeter**2) if perimeter > 0 else 1.0
        rgb = px[y, x].astype(np.float64).mean(axis=0)
        records.append(NucleusRecord(
            nucleus_id=label,
            centroid=(float(x.mean()), float(y.mean())),
            minor_axis=minor, major_axis=major, axis_ratio=major / minor,
            area=float(area), perimeter=perimeter, circularity=circ,
            eccentricity=math.sqrt(max(0.0, 1.0 - lo / hi)),
            solidity=min(1.0, area / pixel_hull_area(rr, cc)),
            mean_r=float(rgb[0]), mean_g=float(rgb[1]), mean_b=float(rgb[2]),
        ))
    if report is not None:
        report["skipped_small"] = report.get("skipped_small", 0) + skipped
        report["n_nuclei"] = report.get("n_nuclei", 0) + len(records)
    return records


def delaunay_features(records: Sequence[NucleusRecord]) -> list[NucleusRecord]:
    """Fill the four graph features from the Delaunay triangulation of centroids.

    Fewer than three distinct centroids, or a collinear set, leaves the
    spatial fields at zero with ``spatial_degenerate`` set.
    """
    if not records:
        return []
    unique, index = merge_duplicates([r.centroid for r in records])
    tris = triangulate(unique)
    if not tris:
        return [replace(r, min_dist=0.0, max_dist=0.0, mean_dist=0.0, degree=0,
                        spatial_degenerate=True) for r in records]
    stats = neighbor_distances(unique, tris)
    return [
        replace(r, min_dist=float(s[0]), max_dist=float(s[1]), mean_dist=float(s[2]),
                degree=int(s[3]), spatial_degenerate=False)
        for r, s in ((r, stats[index[i]]) for i, r in enumerate(records))
    ]


def histogram_stats(values: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """(mean, std, entropy, skewness, kurtosis) of the L1-normalized histogram."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.array([lo, 0.0, 0.0, 0.0, 0.0])
    counts, _ = np.histogram(values, bins=n_bins, range=(lo, hi))
    p = counts / counts.sum()
    centers = lo + (np.arange(n_bins) + 0.5) * (hi - lo) / n_bins
    mu = float(p @ centers)
    dev = centers - mu
    var = float(p @ dev**2)
    nz = p > 0
    entropy = float(-(p[nz] * np.log(p[nz])).sum())
    if var <= 0:
        return np.array([mu, 0.0, entropy, 0.0, 0.0])
    sd = math.sqrt(var)
    return np.array([mu, sd, entropy, float(p @ dev**3) / sd**3, float(p @ dev**4) / var**2])


def aggregate_patch(records: Sequence[NucleusRecord], patch_id: str, **meta) -> PatchFeatureVector:
    if not records:
        raise InputError(f"patch {patch_id} has no nuclei")
    table = np.stack([r.feature_values() for r in records])
    values = np.concatenate([histogram_stats(table[:, j]) for j in range(table.shape[1])])
    return PatchFeatureVector(patch_id, values, len(records), **meta)


def patch_features(patch, mask, min_area: int = MIN_AREA, report: dict | None = None):
    """extract_nuclei -> delaunay_features -> aggregate_patch; None when no nuclei survive."""
    records = delaunay_features(extract_nuclei(patch, mask, min_area, report))
    if not records:
        return None
    return aggregate_patch(
        records, getattr(patch, "patch_id", ""),
        slide_id=getattr(patch, "slide_id", ""), magnification=getattr(patch, "magnification", ""),
    )


def write_features(path, vectors: Sequence[PatchFeatureVector]) -> None:
    with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "slide_id", "n_nuclei", *FEATURE_NAMES])
        for v in vectors:
            w.writerow([v.patch_id, v.slide_id, v.n_nuclei, *(repr(float(x)) for x in v.values)])


def read_features(path):
    """Return (patch_ids, slide_ids, n_nuclei, X) from a feature CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[3:]) != FEATURE_NAMES:
            raise InputError(f"{path}: feature columns do not match the fixed 75-column order")
        ids, slides, counts, rows = [], [], [], []
        for row in reader:
            ids.append(row[0])
            slides.append(row[1])
            counts.append(int(row[2]))
            rows.append([float(v) for v in row[3:]])
    X = np.array(rows, dtype=np.float64).reshape(-1, N_FEATURES)
    return ids, slides, counts, X
