import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histomorph.errors import DegenerateInputError, InputError
from histomorph.raster import PATCH_SIZE, Patch
from histomorph.stain import (
    AUGMENTATION_KINDS,
    RANGES,
    RUIFROK_HED,
    AugmentationDescriptor,
    StainModel,
    augment,
    fit_stain_model,
    normalize,
    od_to_rgb,
    rgb_to_od,
    sample_descriptor,
    sparse_code,
    tta_inverse,
    tta_variants,
)
from histomorph.synth import DEFAULT_STAIN_W, SynthSpec, generate_patch

S = PATCH_SIZE


def _unit(W):
    W = np.asarray(W, float)
    return W / np.linalg.norm(W, axis=0)


def planted_patch(W, seed=0, n=S, sparsity=0.5, white=0.1):
    """Noiseless V = W H with sparse gamma concentrations, rendered to 8-bit RGB."""
    r = np.random.default_rng(seed)
    H = r.gamma(2.0, 0.35, (2, n * n))
    H[r.random((2, n * n)) < sparsity] = 0.0
    H[:, r.random(n * n) < white] = 0.0
    return od_to_rgb(W @ H, (n, n, 3)), H


def cosines(A, B):
    return (A * B).sum(axis=0) / (np.linalg.norm(A, axis=0) * np.linalg.norm(B, axis=0))


# ---------------------------------------------------------------- optical density


def test_od_of_white_is_zero_and_black_is_ln256():
    assert np.all(rgb_to_od(np.full((2, 3), 255)) == 0.0)
    np.testing.assert_allclose(rgb_to_od(np.zeros((1, 3))), math.log(256), rtol=0, atol=1e-12)
    assert abs(math.log(256) - 5.545) < 1e-3


def test_od_round_trip_all_gray_levels():
    gray = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)
    back = od_to_rgb(rgb_to_od(gray), gray.shape)
    assert np.abs(back.astype(int) - gray).max() <= 1


def test_od_to_rgb_clamps():
    assert (od_to_rgb(np.full((3, 4), -5.0)) == 255).all()
    assert (od_to_rgb(np.full((3, 4), 50.0)) == 0).all()


# ---------------------------------------------------------------- sparse coding


def _cd_only(V, W, lam):
    # a zero third column forces the coordinate-descent path
    return sparse_code(V, np.hstack([W, np.zeros((3, 1))]), lam, max_sweeps=5000, tol=1e-14)[:2]


@pytest.mark.parametrize("lam", [0.0, 0.01, 0.1, 2.0])
def test_two_stain_closed_form_matches_coordinate_descent(lam, rng):
    V = rng.uniform(0, 2, (3, 3000))
    W = RUIFROK_HED[:2].T
    np.testing.assert_allclose(sparse_code(V, W, lam), _cd_only(V, W, lam), atol=1e-9)


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_sparse_code_satisfies_kkt(lam, seed):
    V = np.random.default_rng(seed).uniform(0, 3, (3, 50))
    W = DEFAULT_STAIN_W
    H = sparse_code(V, W, lam)
    assert (H >= 0).all()
    grad = 2 * W.T @ (W @ H - V) + lam
    # active coordinates have zero gradient, inactive ones non-negative gradient
    assert np.all(np.abs(grad[H > 0]) < 1e-8)
    assert np.all(grad[H == 0] > -1e-8)


# ---------------------------------------------------------------- NMF fit


def test_recovers_planted_factors():
    px, _ = planted_patch(DEFAULT_STAIN_W, seed=3)
    m = fit_stain_model(px)
    assert m.converged
    assert cosines(m.W, DEFAULT_STAIN_W).min() >= 0.99


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_recovers_synth_stain_matrix(seed):
    patch, _, _ = generate_patch(SynthSpec(seed=seed))
    m = fit_stain_model(patch)
    assert cosines(m.W, DEFAULT_STAIN_W).min() >= 0.99


def test_objective_monotone_and_w_valid():
    for seed in range(4):
        px, _ = planted_patch(_unit(np.array([[0.5, 0.8, 0.3], [0.2, 0.9, 0.4]]).T), seed=seed)
        m = fit_stain_model(px, max_pixels=20000, seed=seed)
        h = np.array(m.history)
        assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))
        assert (m.W >= 0).all()
        np.testing.assert_allclose(np.linalg.norm(m.W, axis=0), 1.0, atol=1e-9)


def test_hematoxylin_column_has_larger_blue():
    px, _ = planted_patch(DEFAULT_STAIN_W[:, ::-1], seed=5)
    m = fit_stain_model(px)
    assert m.W[2, 0] > m.W[2, 1]


def test_white_patch_is_degenerate():
    with pytest.raises(DegenerateInputError):
        fit_stain_model(np.full((S, S, 3), 255, np.uint8))


def test_single_stain_patch():
    h = DEFAULT_STAIN_W[:, :1]
    r = np.random.default_rng(2)
    H = r.gamma(2.0, 0.4, (1, S * S))
    H[:, r.random(S * S) < 0.3] = 0
    px = od_to_rgb(h @ H, (S, S, 3))
    m = fit_stain_model(px)
    best = int(np.argmax(cosines(m.W, np.hstack([h, h]))))
    assert cosines(m.W[:, [best]], h)[0] >= 0.99
    assert m.p99[1 - best] <= 0.05 * m.p99[best]


def test_non_convergence_warns_and_returns_iterate():
    px, _ = planted_patch(DEFAULT_STAIN_W, seed=1)
    with pytest.warns(RuntimeWarning):
        m = fit_stain_model(px, max_iter=1, tol=0.0)
    assert not m.converged and m.n_iter == 1


def test_subsample_is_seeded():
    px, _ = planted_patch(DEFAULT_STAIN_W, seed=4)
    a = fit_stain_model(px, max_pixels=5000, seed=7)
    b = fit_stain_model(px, max_pixels=5000, seed=7)
    np.testing.assert_array_equal(a.W, b.W)


def test_stain_model_json_round_trip():
    m = StainModel(DEFAULT_STAIN_W, np.array([1.5, 0.7]), 0.1)
    d = json.loads(m.to_json())
    assert set(d) == {"W", "p99", "lambda"}
    assert StainModel.from_json(m.to_json()) == m


@pytest.mark.parametrize("W,p99", [
    (-DEFAULT_STAIN_W, [1, 1]),
    (DEFAULT_STAIN_W * 2, [1, 1]),
    (DEFAULT_STAIN_W, [-1, 1]),
    (np.ones((2, 2)), [1, 1]),
])
def test_stain_model_invariants_enforced(W, p99):
    with pytest.raises(InputError):
        StainModel(W, np.array(p99, float), 0.1)


# ---------------------------------------------------------------- normalize


@pytest.fixture(scope="module")
def synth_patch():
    return generate_patch(SynthSpec(seed=11))[0]


def test_self_normalization_is_near_identity(synth_patch):
    m = fit_stain_model(synth_patch)
    out = normalize(synth_patch, m, m)
    assert isinstance(out, Patch) and out.pixels.shape == synth_patch.pixels.shape
    assert np.abs(out.pixels.astype(float) - synth_patch.pixels).mean() <= 3


def test_white_stays_white_under_any_target(synth_patch):
    src = fit_stain_model(synth_patch)
    white = np.all(synth_patch.pixels == 255, axis=2)
    assert white.sum() > 1000
    for W in (DEFAULT_STAIN_W, RUIFROK_HED[:2].T, _unit(np.array([[0.3, 0.9, 0.3], [0.05, 0.8, 0.6]]).T)):
        tgt = StainModel(_unit(W), np.array([2.0, 1.2]), 0.1)
        out = normalize(synth_patch, src, tgt).pixels
        assert np.abs(out[white].astype(int) - 255).max() <= 3


def test_different_stains_same_concentrations_converge():
    W2 = _unit(np.array([[0.55, 0.80, 0.30], [0.15, 0.95, 0.18]]).T)
    a, _ = planted_patch(DEFAULT_STAIN_W, seed=9)
    b, _ = planted_patch(W2, seed=9)
    target = fit_stain_model(a)
    na = normalize(a, fit_stain_model(a), target)
    nb = normalize(b, fit_stain_model(b), target)
    assert np.abs(na.astype(float) - nb).mean() <= 3


def test_normalize_idempotent(synth_patch):
    target = fit_stain_model(generate_patch(SynthSpec(seed=12))[0])
    once = normalize(synth_patch, fit_stain_model(synth_patch), target)
    twice = normalize(once, fit_stain_model(once), target)
    assert abs(twice.pixels.astype(float).mean() - once.pixels.astype(float).mean()) <= 1


def test_zero_p99_row_is_left_unscaled(synth_patch):
    src = StainModel(DEFAULT_STAIN_W, np.array([0.0, 1.0]), 0.1)
    tgt = StainModel(DEFAULT_STAIN_W, np.array([5.0, 1.0]), 0.1)
    out = normalize(synth_patch.pixels, src, tgt)
    same = normalize(synth_patch.pixels, src, src)
    np.testing.assert_array_equal(out, same)


# ---------------------------------------------------------------- augmentation


def _rand_px(seed=0):
    return np.random.default_rng(seed).integers(0, 256, (64, 64, 3), dtype=np.uint8)


def test_rotation_180_twice_is_identity():
    px = _rand_px()
    d = AugmentationDescriptor("rotation", {"degrees": 180})
    np.testing.assert_array_equal(augment(augment(px, d), d), px)


def test_hsv_identity_parameters():
    px = _rand_px(1)
    d = AugmentationDescriptor("hsv", {"hue_shift": 0.0, "sat_gain": 1.0, "val_gain": 1.0})
    assert np.abs(augment(px, d).astype(int) - px).max() <= 1


def test_hed_identity_parameters():
    px = _rand_px(2)
    d = AugmentationDescriptor("hed", {k: (1.0 if "gain" in k else 0.0) for k in RANGES["hed"]})
    assert np.abs(augment(px, d).astype(int) - px).max() <= 1


def test_gaussian_noise_replays_bit_identically():
    px = _rand_px(3)
    d = AugmentationDescriptor("gaussian_noise", {"sigma": 8.0}, seed=99)
    np.testing.assert_array_equal(augment(px, d), augment(px, AugmentationDescriptor.from_json(d.to_json())))
    other = AugmentationDescriptor("gaussian_noise", {"sigma": 8.0}, seed=100)
    assert not np.array_equal(augment(px, d), augment(px, other))


@pytest.mark.parametrize("seed", range(40))
def test_augmentations_preserve_shape_and_type(seed):
    px = _rand_px(seed)
    d = sample_descriptor(seed)
    out = augment(px, d)
    assert out.shape == px.shape and out.dtype == np.uint8
    if d.kind in ("flip", "rotation"):
        # pure permutations keep the value histogram
        assert Counter(out.ravel().tolist()) == Counter(px.ravel().tolist())


def test_augment_keeps_patch_metadata():
    p = Patch("s", "s_0_0_20x", 0, 0, "20x", np.zeros((S, S, 3), np.uint8))
    out = augment(p, AugmentationDescriptor("flip", {"direction": "vertical"}))
    assert isinstance(out, Patch) and out.patch_id == p.patch_id


@pytest.mark.parametrize("kind,params", [
    ("hsv", {"hue_shift": 11.0, "sat_gain": 1.0, "val_gain": 1.0}),
    ("hed", {**{k: 0.0 for k in RANGES["hed"]}, "h_gain": 1.2}),
    ("gaussian_noise", {"sigma": 13.0}),
    ("flip", {"direction": "diagonal"}),
    ("rotation", {"degrees": 45}),
    ("blur", {}),
])
def test_out_of_range_params_rejected(kind, params):
    with pytest.raises(InputError):
        AugmentationDescriptor(kind, params)


def test_sample_descriptor_reproducible_and_in_range():
    assert sample_descriptor(5) == sample_descriptor(5)
    for s in range(500):
        d = sample_descriptor(s)
        AugmentationDescriptor(d.kind, d.params, d.seed)  # revalidates


def test_sample_descriptor_kinds_uniform():
    counts = Counter(sample_descriptor(s).kind for s in range(100_000))
    assert set(counts) == set(AUGMENTATION_KINDS)
    for k in AUGMENTATION_KINDS:
        assert abs(counts[k] / 100_000 - 0.2) <= 0.01
    chi2 = sum((c - 20_000) ** 2 / 20_000 for c in counts.values())
    assert chi2 < 18.47  # 0.999 quantile, 4 dof


# ---------------------------------------------------------------- TTA


def test_tta_constant_patch():
    v = tta_variants(np.full((8, 8, 3), 77, np.uint8))
    assert len(v) == 8 and all((x == 77).all() for x in v)


def test_tta_variant_zero_identity_and_inverses():
    px = _rand_px(4)
    v = tta_variants(px)
    np.testing.assert_array_equal(v[0], px)
    for i, x in enumerate(v):
        np.testing.assert_array_equal(tta_inverse(x, i), px)
    assert len({x.tobytes() for x in v}) == 8
