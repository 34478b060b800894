import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from histomorph import _io
from histomorph.errors import InputError
from histomorph.raster import (
    PATCH_SIZE,
    ArrayTileSource,
    ManifestTileSource,
    Patch,
    TissueMask,
    build_tissue_mask,
    extract_patches,
    lanczos_resample,
    lanczos_weights,
    otsu_threshold,
    patch_name,
    read_manifest,
    round_half_away,
    saturation_levels,
    to_uint8,
    upscale_to_40x,
    write_manifest,
)

S = PATCH_SIZE


def _patch(px, mag="20x", x=0, y=0):
    return Patch("s1", patch_name("s1", x, y, mag), x, y, mag, px)


# ---------------------------------------------------------------- oracles


def naive_otsu(levels):
    """Exhaustive scan of all 256 cut points maximizing between-class variance."""
    hist = np.bincount(levels.ravel(), minlength=256).astype(float)
    total = hist.sum()
    best, best_t = -1.0, 0
    for t in range(256):
        w0 = hist[: t + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[: t + 1] * np.arange(t + 1)).sum() / w0
        m1 = (hist[t + 1:] * np.arange(t + 1, 256)).sum() / w1
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best:
            best, best_t = var, t
    return best_t


def naive_lanczos_1d(signal, n_out, a=3):
    """Direct per-sample Lanczos-3 convolution with clamp-to-edge."""
    n_in = len(signal)
    scale = n_in / n_out
    out = np.zeros(n_out)
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        acc = wsum = 0.0
        for j in range(math.floor(center) - a - 1, math.floor(center) + a + 2):
            x = center - j
            if abs(x) >= a:
                continue
            w = 1.0 if x == 0 else a * math.sin(math.pi * x) * math.sin(math.pi * x / a) / (math.pi * x) ** 2
            acc += w * signal[min(max(j, 0), n_in - 1)]
            wsum += w
        out[i] = acc / wsum
    return out


# ---------------------------------------------------------------- tissue mask


def test_saturation_of_white_and_magenta():
    white = np.full((4, 4, 3), 255, np.uint8)
    magenta = np.zeros((4, 4, 3), np.uint8)
    magenta[..., 0] = magenta[..., 2] = 255
    assert (saturation_levels(white) == 0).all()
    assert (saturation_levels(magenta) == 255).all()


def test_white_thumbnail_gives_empty_mask():
    m = build_tissue_mask(np.full((64, 64, 3), 255, np.uint8), 0.5, (4, 4))
    assert m.grid.shape == (4, 4)
    assert not m.grid.any()
    assert m.n_tissue == 0


def test_magenta_thumbnail_gives_full_mask():
    px = np.zeros((64, 64, 3), np.uint8)
    px[..., 0] = px[..., 2] = 255
    assert build_tissue_mask(px, 0.5, (4, 4)).grid.all()


def test_half_pink_half_white_marks_tissue_half(rng):
    thumb = np.full((80, 80, 3), 255, np.uint8)
    pink = np.array([230, 120, 190]) + rng.integers(-15, 15, (80, 40, 3))
    thumb[:, :40] = np.clip(pink, 0, 255)
    m = build_tissue_mask(thumb, 0.5, (4, 4))
    assert m.threshold == naive_otsu(saturation_levels(thumb))
    expected = np.zeros((4, 4), bool)
    expected[:, :2] = True
    np.testing.assert_array_equal(m.grid, expected)


@given(arrays(np.uint8, (24, 24), elements=st.integers(0, 255)))
def test_otsu_matches_exhaustive_scan(levels):
    if np.unique(levels).size < 2:
        return
    assert otsu_threshold(levels) == naive_otsu(levels)


def test_tissue_mask_is_idempotent_and_order_free(rng):
    thumb = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
    a = build_tissue_mask(thumb, 0.3, (3, 4))
    b = build_tissue_mask(thumb.copy(), 0.3, (3, 4))
    np.testing.assert_array_equal(a.grid, b.grid)
    np.testing.assert_array_equal(a.tissue_fraction, b.tissue_fraction)
    # flipping the thumbnail flips the grid: no dependence on traversal order
    c = build_tissue_mask(thumb[::-1, ::-1].copy(), 0.3, (3, 4))
    np.testing.assert_array_equal(c.grid, a.grid[::-1, ::-1])


def test_grid_true_iff_fraction_reaches_minimum(rng):
    thumb = rng.integers(0, 256, (60, 60, 3), dtype=np.uint8)
    m = build_tissue_mask(thumb, 0.45, (5, 5))
    np.testing.assert_array_equal(m.grid, m.tissue_fraction >= 0.45)
    assert ((m.tissue_fraction >= 0) & (m.tissue_fraction <= 1)).all()


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_tissue_fraction_bounds_rejected(bad):
    with pytest.raises(InputError):
        build_tissue_mask(np.zeros((8, 8, 3), np.uint8), bad)


def test_empty_thumbnail_rejected():
    with pytest.raises(InputError):
        build_tissue_mask(np.zeros((0, 0, 3), np.uint8))


# ---------------------------------------------------------------- patch extraction


def _mask(grid):
    grid = np.asarray(grid, bool)
    return TissueMask(grid, grid.astype(float), 0, 0.5)


class _ConstantSource:
    """Huge virtual slide whose tiles all share one array."""

    slide_id = "big"
    magnification = "20x"

    def __init__(self, rows, cols):
        self.grid_shape = (rows, cols)
        self._tile = np.full((S, S, 3), 200, np.uint8)

    def read_tile(self, row, col):
        return self._tile


def test_all_true_grid_yields_every_cell():
    src = ArrayTileSource("s", np.zeros((4 * S, 4 * S, 3), np.uint8))
    patches = list(extract_patches(src, _mask(np.ones((4, 4)))))
    assert len(patches) == 16
    assert [(p.y, p.x) for p in patches] == [(r * S, c * S) for r in range(4) for c in range(4)]


def test_checkerboard_grid_yields_alternate_cells():
    grid = (np.add.outer(np.arange(4), np.arange(4)) % 2) == 0
    src = ArrayTileSource("s", np.zeros((4 * S, 4 * S, 3), np.uint8))
    patches = list(extract_patches(src, _mask(grid)))
    assert len(patches) == 8
    assert all((p.x // S + p.y // S) % 2 == 0 for p in patches)


def test_three_thousand_tissue_cells_give_three_thousand_patches():
    src = _ConstantSource(50, 60)
    n = sum(1 for _ in extract_patches(src, _mask(np.ones((50, 60)))))
    assert n == 3000


@given(arrays(bool, (3, 5)))
def test_patch_count_equals_true_cells(grid):
    src = _ConstantSource(3, 5)
    assert sum(1 for _ in extract_patches(src, _mask(grid))) == int(grid.sum())


def test_extracted_pixels_come_from_the_right_tile(rng):
    slide = rng.integers(0, 256, (2 * S, 3 * S, 3), dtype=np.uint8)
    src = ArrayTileSource("s", slide)
    for p in extract_patches(src, _mask(np.ones((2, 3)))):
        np.testing.assert_array_equal(p.pixels, slide[p.y:p.y + S, p.x:p.x + S])
        assert p.patch_id == f"s_{p.x}_{p.y}_20x"


def test_grid_mismatch_rejected():
    src = _ConstantSource(2, 2)
    with pytest.raises(InputError):
        list(extract_patches(src, _mask(np.ones((3, 3)))))


def test_unreadable_tile_is_logged_and_skipped(tmp_path):
    good = np.full((S, S, 3), 90, np.uint8)
    _io.write_png(tmp_path / "a.png", good)
    (tmp_path / "b.png").write_bytes(b"not a png")
    rows = [
        {"slide_id": "s", "patch_id": "s_0_0_20x", "path": "a.png", "x": "0", "y": "0", "magnification": "20x"},
        {"slide_id": "s", "patch_id": "s_512_0_20x", "path": "b.png", "x": "512", "y": "0", "magnification": "20x"},
    ]
    src = ManifestTileSource("s", rows, tmp_path)
    errors = []
    patches = list(extract_patches(src, _mask(np.ones((1, 2))), errors))
    assert [p.patch_id for p in patches] == ["s_0_0_20x"]
    assert len(errors) == 1 and (errors[0].row, errors[0].col) == (0, 1)


def test_manifest_round_trip(tmp_path):
    rows = [{"slide_id": "s", "patch_id": "s_0_0_20x", "path": "t.png", "x": "0", "y": "0",
             "magnification": "20x"}]
    write_manifest(tmp_path / "m.csv", rows)
    assert read_manifest(tmp_path / "m.csv") == rows


def test_manifest_missing_columns_rejected(tmp_path):
    (tmp_path / "m.csv").write_text("slide_id,path\ns,a.png\n")
    with pytest.raises(InputError):
        read_manifest(tmp_path / "m.csv")


def test_manifest_thumbnail_renders_missing_tiles_white(tmp_path):
    _io.write_png(tmp_path / "a.png", np.zeros((S, S, 3), np.uint8))
    rows = [{"slide_id": "s", "patch_id": "p", "path": "a.png", "x": "512", "y": "512",
             "magnification": "20x"}]
    thumb = ManifestTileSource("s", rows, tmp_path).thumbnail(16)
    assert thumb.shape == (64, 64, 3)
    assert (thumb[:32] == 255).all()
    assert (thumb[32:, 32:] == 0).all()


def test_patch_validates_shape():
    with pytest.raises(InputError):
        Patch("s", "p", 0, 0, "20x", np.zeros((10, 10, 3), np.uint8))
    with pytest.raises(InputError):
        Patch("s", "p", 0, 0, "10x", np.zeros((S, S, 3), np.uint8))


# ---------------------------------------------------------------- Lanczos


def test_weights_rows_sum_to_one():
    w = lanczos_weights(512, 1024)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("n_in,n_out", [(16, 32), (13, 26), (512, 1024)])
def test_weights_match_naive_convolution(n_in, n_out, rng):
    sig = rng.uniform(0, 255, n_in)
    np.testing.assert_allclose(lanczos_weights(n_in, n_out) @ sig, naive_lanczos_1d(sig, n_out), atol=1e-9)


def test_two_d_resample_matches_separable_oracle(rng):
    img = rng.uniform(0, 255, (20, 24))
    got = lanczos_resample(img, (40, 48))
    rows = np.array([naive_lanczos_1d(r, 48) for r in img])
    want = np.array([naive_lanczos_1d(c, 40) for c in rows.T]).T
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_round_half_away_from_zero():
    x = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49999])
    np.testing.assert_array_equal(round_half_away(x), [-3, -2, -1, 1, 2, 3, 0])
    np.testing.assert_array_equal(to_uint8(np.array([-3.0, 0.5, 254.5, 300.0])), [0, 1, 255, 255])


def test_upscale_gives_four_quadrants(rng):
    p = _patch(rng.integers(0, 256, (S, S, 3), dtype=np.uint8), x=1024, y=512)
    quads = upscale_to_40x(p)
    assert len(quads) == 4
    assert [q.patch_id for q in quads] == [f"{p.patch_id}_q{i}" for i in range(4)]
    assert [(q.x, q.y) for q in quads] == [(2048, 1024), (2560, 1024), (2048, 1536), (2560, 1536)]
    for q in quads:
        assert q.pixels.shape == (S, S, 3) and q.pixels.dtype == np.uint8
        assert q.magnification == "40x"


def test_quadrants_tile_the_zoomed_image(rng):
    px = rng.integers(0, 256, (S, S, 3), dtype=np.uint8)
    big = to_uint8(lanczos_resample(px, (2 * S, 2 * S)))
    q = [x.pixels for x in upscale_to_40x(_patch(px))]
    np.testing.assert_array_equal(np.vstack([np.hstack(q[:2]), np.hstack(q[2:])]), big)


@pytest.mark.parametrize("v", [0, 1, 127, 254, 255])
def test_constant_patch_is_exact(v):
    for q in upscale_to_40x(_patch(np.full((S, S, 3), v, np.uint8))):
        assert (q.pixels == v).all()


def test_gradient_quadrants_ordered_and_match_oracle():
    ramp = np.round(np.linspace(0, 255, S)).astype(np.uint8)
    px = np.repeat(np.broadcast_to(ramp, (S, S))[..., None], 3, axis=2).copy()
    quads = upscale_to_40x(_patch(px))
    assert quads[0].pixels.mean() < quads[1].pixels.mean()
    assert quads[2].pixels.mean() < quads[3].pixels.mean()
    row = to_uint8(naive_lanczos_1d(ramp.astype(float), 2 * S))
    np.testing.assert_array_equal(quads[0].pixels[0, :, 0], row[:S])
    np.testing.assert_array_equal(quads[1].pixels[0, :, 0], row[S:])


def test_upscale_rejects_40x_input():
    with pytest.raises(InputError):
        upscale_to_40x(_patch(np.zeros((S, S, 3), np.uint8), mag="40x"))
