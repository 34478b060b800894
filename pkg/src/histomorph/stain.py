"""Stain separation, structure-preserving normalization and training augmentations.

Pixels are modelled in optical density (Beer-Lambert) space as ``V ~= W @ H``
with ``W`` a 3x2 matrix of unit-norm stain colours (hematoxylin, eosin) and
``H`` non-negative, sparse concentrations.
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import DegenerateInputError, InputError
from .raster import to_uint8

# Ruifrok & Johnston H&E-DAB colour vectors (rows), unit-normalized.
RUIFROK_HED = np.array([
    [0.65, 0.70, 0.29],
    [0.07, 0.99, 0.11],
    [0.27, 0.57, 0.78],
])
RUIFROK_HED = RUIFROK_HED / np.linalg.norm(RUIFROK_HED, axis=1, keepdims=True)
_HED_INV = np.linalg.inv(RUIFROK_HED)

MIN_FOREGROUND = 100


def _pixels(patch) -> np.ndarray:
    return np.asarray(getattr(patch, "pixels", patch))


def rgb_to_od(pixels) -> np.ndarray:
    """8-bit RGB (any leading shape) -> 3xN optical density."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    return -np.log((px + 1.0) / 256.0).T


def od_to_rgb(od: np.ndarray, shape=None) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, clamped to 0..255 and reshaped to ``shape``."""
    px = to_uint8(256.0 * np.exp(-np.asarray(od, dtype=np.float64).T) - 1.0)
    return px.reshape(shape) if shape is not None else px


# --------------------------------------------------------------------------
# sparse NMF
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StainModel:
    W: np.ndarray
    p99: np.ndarray
    lam: float
    converged: bool = field(default=True, compare=False)
    n_iter: int = field(default=0, compare=False)
    history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        p99 = np.asarray(self.p99, dtype=np.float64)
        if W.shape != (3, 2) or p99.shape != (2,):
            raise InputError("stain model needs a 3x2 W and a 2-vector p99")
        if (W < 0).any() or (p99 < 0).any():
            raise InputError("stain model entries must be non-negative")
        if not np.allclose(np.linalg.norm(W, axis=0), 1.0, atol=1e-9):
            raise InputError("stain colour columns must have unit norm")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "p99", p99)

    def __eq__(self, other):
        if not isinstance(other, StainModel):
            return NotImplemented
        return (np.array_equal(self.W, other.W) and np.array_equal(self.p99, other.p99)
                and self.lam == other.lam)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "p99": self.p99.tolist(), "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "StainModel":
        return cls(np.array(d["W"]), np.array(d["p99"]), float(d["lambda"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "StainModel":
        return cls.from_dict(json.loads(text))


def _objective(V, W, H, lam):
    r = V - W @ H
    return float(np.einsum("ij,ij->", r, r) + lam * H.sum())


def sparse_code(V, W, lam, H=None, max_sweeps=500, tol=1e-9):
    """Non-negative lasso ``min ||V - W H||^2 + lam |H|_1``.

    Two well-conditioned stains are solved exactly per pixel. Otherwise
    coordinate descent, warm-started from ``H`` when given.
    """
    k = W.shape[1]
    G = W.T @ W
    B = W.T @ V
    if k == 2 and np.linalg.det(G) > 1e-12 * G[0, 0] * G[1, 1]:
        return _lasso2(G, B, lam)
    H = np.zeros((k, V.shape[1])) if H is None else H.copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for i in range(k):
            if G[i, i] <= 0:
                continue
            resid = B[i] - G[i] @ H + G[i, i] * H[i]
            new = np.maximum(0.0, (resid - lam / 2.0) / G[i, i])
            delta = max(delta, float(np.max(np.abs(new - H[i]), initial=0.0)))
            H[i] = new
        if delta < tol:
            break
    return H


def _lasso2(G, B, lam):
    """Exact two-stain non-negative lasso: best of the four active sets per pixel."""
    c = B - lam / 2.0
    det = G[0, 0] * G[1, 1] - G[0, 1] ** 2
    both = np.stack([(G[1, 1] * c[0] - G[0, 1] * c[1]) / det,
                     (G[0, 0] * c[1] - G[0, 1] * c[0]) / det])
    only0 = np.maximum(c[0] / G[0, 0], 0.0)
    only1 = np.maximum(c[1] / G[1, 1], 0.0)
    # objective relative to ||v||^2: h'Gh - 2 c'h
    f_both = -(both * c).sum(axis=0)
    f0 = -only0 * c[0]
    f1 = -only1 * c[1]
    H = np.zeros_like(B)
    best = np.zeros(B.shape[1])
    use0 = f0 < best
    H[0, use0] = only0[use0]
    best = np.where(use0, f0, best)
    use1 = f1 < best
    H[:, use1] = 0.0
    H[1, use1] = only1[use1]
    best = np.where(use1, f1, best)
    use_both = (both >= 0).all(axis=0) & (f_both < best)
    H[:, use_both] = both[:, use_both]
    return H


def _normalize_columns(W):
    n = np.linalg.norm(W, axis=0)
    return W / np.where(n > 0, n, 1.0)


def _update_colours(V, W, H, max_steps=20):
    """Projected gradient on W with column renormalization and backtracking.

    A step is accepted only if the data term does not increase, so the
    overall objective stays monotone.
    """
    HHt = H @ H.T
    VHt = V @ H.T
    vv = float(np.einsum("ij,ij->", V, V))

    def fit(Wc):
        return vv - 2.0 * np.sum(Wc * VHt) + np.sum((Wc.T @ Wc) * HHt)

    cur = fit(W)
    lip = 2.0 * max(float(np.linalg.eigvalsh(HHt)[-1]), 1e-12)
    for _ in range(max_steps):
        grad = 2.0 * (W @ HHt - VHt)
        step = 1.0 / lip
        for _ in range(30):
            cand = np.maximum(W - step * grad, 0.0)
            dead = np.linalg.norm(cand, axis=0) == 0
            cand[:, dead] = W[:, dead]
            cand = _normalize_columns(cand)
            val = fit(cand)
            if val <= cur:
                break
            step /= 2.0
        else:
            return W
        if cur - val <= 1e-12 * max(cur, 1.0):
            return cand if val <= cur else W
        W, cur = cand, val
    return W


def foreground(V: np.ndarray, od_floor: float) -> np.ndarray:
    return V.max(axis=0) >= od_floor


def fit_stain_model(
    patch,
    lam: float = 0.1,
    od_floor: float = 0.15,
    max_iter: int = 200,
    tol: float = 1e-6,
    max_pixels: int | None = None,
    seed: int = 0,
) -> StainModel:
    """Fit hematoxylin/eosin colours and concentration percentiles by sparse NMF.

    Alternates a coordinate-descent lasso step on the concentrations with a
    projected-gradient step on the colours, starting from the Ruifrok basis.
    ``max_pixels`` caps the number of foreground pixels used (uniform,
    seeded subsample).
    """
    V = rgb_to_od(_pixels(patch))
    V = V[:, foreground(V, od_floor)]
    if V.shape[1] < MIN_FOREGROUND:
        raise DegenerateInputError(
            f"only {V.shape[1]} foreground pixels (need {MIN_FOREGROUND}) at od_floor={od_floor}"
        )
    if max_pixels is not None and V.shape[1] > max_pixels:
        idx = np.sort(np.random.default_rng(seed).choice(V.shape[1], max_pixels, replace=False))
        V = V[:, idx]

    W = RUIFROK_HED[:2].T.copy()
    H = sparse_code(V, W, lam)
    history = [_objective(V, W, H, lam)]
    converged = False
    for it in range(1, max_iter + 1):
        W = _update_colours(V, W, H)
        H = sparse_code(V, W, lam, H=H)
        history.append(_objective(V, W, H, lam))
        prev, cur = history[-2], history[-1]
        if abs(prev - cur) <= tol * max(abs(prev), 1e-300):
            converged = True
            break
    if not converged:
        warnings.warn(f"stain NMF did not converge in {max_iter} iterations", RuntimeWarning)

    if W[2, 0] < W[2, 1]:
        W, H = W[:, ::-1].copy(), H[::-1].copy()
    p99 = np.percentile(H, 99, axis=1)
    return StainModel(W, p99, lam, converged, it, tuple(history))


def normalize(patch, source: StainModel, target: StainModel, coding_lambda: float = 0.01):
    """Re-render ``patch`` with the target's stain colours and concentration scale.

    Returns the same type as given (Patch or raw array).
    """
    px = _pixels(patch)
    V = rgb_to_od(px)
    H = sparse_code(V, source.W, coding_lambda)
    scale = np.divide(target.p99, source.p99, out=np.ones(2), where=source.p99 > 0)
    out = od_to_rgb(target.W @ (H * scale[:, None]), px.shape)
    return patch.with_pixels(out) if hasattr(patch, "with_pixels") else out


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

AUGMENTATION_KINDS = ("hsv", "hed", "gaussian_noise", "flip", "rotation")

RANGES = {
    "hsv": {"hue_shift": (-10.0, 10.0), "sat_gain": (0.9, 1.1), "val_gain": (0.9, 1.1)},
    "hed": {
        "h_gain": (0.95, 1.05), "e_gain": (0.95, 1.05), "d_gain": (0.95, 1.05),
        "h_bias": (-0.05, 0.05), "e_bias": (-0.05, 0.05), "d_bias": (-0.05, 0.05),
    },
    "gaussian_noise": {"sigma": (0.0, 12.75)},
}
FLIP_DIRECTIONS = ("horizontal", "vertical")
ROTATIONS = (90, 180, 270)


@dataclass(frozen=True)
class AugmentationDescriptor:
    kind: str
    params: dict
    seed: int = 0

    def __post_init__(self):
        validate_descriptor(self)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "seed": self.seed},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AugmentationDescriptor":
        d = json.loads(line)
        return cls(d["kind"], d["params"], int(d["seed"]))


def validate_descriptor(d: AugmentationDescriptor) -> None:
    if d.kind not in AUGMENTATION_KINDS:
        raise InputError(f"unknown augmentation kind {d.kind!r}")
    if not 0 <= d.seed < 2**64:
        raise InputError("seed must be a 64-bit unsigned integer")
    if d.kind in RANGES:
        spec = RANGES[d.kind]
        if set(d.params) != set(spec):
            raise InputError(f"{d.kind} expects params {sorted(spec)}")
        for name, (lo, hi) in spec.items():
            if not lo <= d.params[name] <= hi:
                raise InputError(f"{d.kind}.{name}={d.params[name]} outside [{lo}, {hi}]")
    elif d.kind == "flip":
        if d.params.get("direction") not in FLIP_DIRECTIONS or len(d.params) != 1:
            raise InputError(f"flip expects direction in {FLIP_DIRECTIONS}")
    elif d.params.get("degrees") not in ROTATIONS or len(d.params) != 1:
        raise InputError(f"rotation expects degrees in {ROTATIONS}")


def sample_descriptor(rng_seed: int) -> AugmentationDescriptor:
    """Draw a kind uniformly, then its parameters uniformly over the light range."""
    r = random.Random(rng_seed)
    kind = r.choice(AUGMENTATION_KINDS)
    if kind in RANGES:
        params = {name: r.uniform(lo, hi) for name, (lo, hi) in RANGES[kind].items()}
    elif kind == "flip":
        params = {"direction": r.choice(FLIP_DIRECTIONS)}
    else:
        params = {"degrees": r.choice(ROTATIONS)}
    return AugmentationDescriptor(kind, params, rng_seed % 2**64)


def _augment_array(px: np.ndarray, d: AugmentationDescriptor) -> np.ndarray:
    p = d.params
    if d.kind == "flip":
        return np.ascontiguousarray(px[:, ::-1] if p["direction"] == "horizontal" else px[::-1])
    if d.kind == "rotation":
        return np.ascontiguousarray(np.rot90(px, p["degrees"] // 90))
    if d.kind == "gaussian_noise":
        noise = np.random.default_rng(d.seed).normal(0.0, p["sigma"], px.shape)
        return to_uint8(px + noise)
    if d.kind == "hsv":
        hsv = rgb_to_hsv(px / 255.0)
        hsv[..., 0] = (hsv[..., 0] + p["hue_shift"] / 360.0) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * p["sat_gain"], 0, 1)
        hsv[..., 2] = np.clip(hsv[..., 2] * p["val_gain"], 0, 1)
        return to_uint8(hsv_to_rgb(hsv) * 255.0)
    # hed
    conc = rgb_to_od(px).T @ _HED_INV
    gain = np.array([p["h_gain"], p["e_gain"], p["d_gain"]])
    bias = np.array([p["h_bias"], p["e_bias"], p["d_bias"]])
    return od_to_rgb(((conc * gain + bias) @ RUIFROK_HED).T, px.shape)


def augment(patch, d: AugmentationDescriptor):
    validate_descriptor(d)
    px = _augment_array(_pixels(patch), d)
    return patch.with_pixels(px) if hasattr(patch, "with_pixels") else px


def _dihedral(px, index):
    flip, k = divmod(index, 4)
    if flip:
        px = px[:, ::-1]
    return np.ascontiguousarray(np.rot90(px, k))


def tta_variants(patch) -> list:
    """The eight dihedral transforms; index ``i`` = optional h-flip (i // 4) then i % 4 quarter turns."""
    px = _pixels(patch)
    out = [_dihedral(px, i) for i in range(8)]
    if hasattr(patch, "with_pixels"):
        return [patch.with_pixels(v) for v in out]
    return out


def tta_inverse(variant, index: int) -> np.ndarray:
    flip, k = divmod(index, 4)
    px = np.rot90(_pixels(variant), -k)
    if flip:
        px = px[:, ::-1]
    return np.ascontiguousarray(px)
