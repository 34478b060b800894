"""Temperature scaling of external logits, discriminative filtering, sampling and slide aggregation."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import _io
from .errors import DegenerateInputError, InputError
from .stain import AugmentationDescriptor, sample_descriptor

ECE_BINS = 15
T_BOUNDS = (0.05, 50.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class LogitRecord:
    patch_id: str
    slide_id: str
    z: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 1 or not np.isfinite(self.z).all():
            raise InputError(f"{self.patch_id}: logits must be a finite vector")
        if self.label is not None and not 0 <= self.label < self.z.size:
            raise InputError(f"{self.patch_id}: label {self.label} outside [0, {self.z.size})")


@dataclass(frozen=True)
class CalibrationModel:
    T: float
    threshold: float = 0.9
    report: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.T > 0:
            raise InputError("temperature must be positive")
        if not 0 < self.threshold < 1:
            raise InputError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"T": self.T, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d) -> "CalibrationModel":
        return cls(float(d["T"]), float(d.get("threshold", 0.9)))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def calibrated_confidence(z, T: float) -> np.ndarray:
    """softmax(z / T); works on one logit vector or a stack of them."""
    if not T > 0:
        raise InputError(f"temperature must be positive, got {T}")
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise InputError("logits must be finite")
    return softmax(z / T)


def _stack(records: Sequence[LogitRecord]):
    Z = np.stack([r.z for r in records])
    if any(r.label is None for r in records):
        raise InputError("all records must be labeled")
    y = np.array([r.label for r in records], dtype=np.int64)
    return Z, y


def nll(Z: np.ndarray, y: np.ndarray, T: float) -> float:
    """Mean negative log-likelihood of softmax(Z / T)."""
    s = Z / T
    m = s.max(axis=1)
    lse = m + np.log(np.exp(s - m[:, None]).sum(axis=1))
    return float(np.mean(lse - s[np.arange(len(y)), y]))


def expected_calibration_error(probs: np.ndarray, y: np.ndarray, n_bins: int = ECE_BINS) -> float:
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == y
    # bins are (k/n, (k+1)/n]
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            total += sel.sum() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total / len(y))


def golden_section(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(
    val: Sequence[LogitRecord], threshold: float = 0.9, tol: float = 1e-4
) -> CalibrationModel:
    """Temperature minimizing validation NLL over [0.05, 50].

    NLL is convex in 1/T, hence unimodal in T, so golden-section search
    finds the global minimum. T = 1 is kept whenever it scores no worse,
    on NLL or on 15-bin ECE.
    """
    if not val:
        raise DegenerateInputError("no validation records")
    Z, y = _stack(val)
    if np.unique(y).size < 2:
        raise DegenerateInputError("temperature fitting needs at least two classes")

    T = golden_section(lambda t: nll(Z, y, t), *T_BOUNDS, tol)
    nll1, nllT = nll(Z, y, 1.0), nll(Z, y, T)
    ece1 = expected_calibration_error(softmax(Z), y)
    eceT = expected_calibration_error(softmax(Z / T), y)
    fallback = nll1 <= nllT or eceT > ece1
    if fallback:
        T, nllT, eceT = 1.0, nll1, ece1
    report = {
        "n": int(len(y)), "T": T,
        "nll_before": nll1, "nll_after": nllT,
        "ece_before": ece1, "ece_after": eceT,
        "ece_bins": ECE_BINS, "kept_unit_temperature": bool(fallback),
    }
    return CalibrationModel(T, threshold, report)


def filter_discriminative(records: Iterable[LogitRecord], m: CalibrationModel):
    """Split into (kept, dropped): kept = correct prediction with confidence > threshold."""
    kept, dropped = [], []
    for r in records:
        if r.label is None:
            raise InputError(f"{r.patch_id}: discriminative filtering needs a label")
        p = calibrated_confidence(r.z, m.T)
        k = int(np.argmax(p))
        (kept if k == r.label and p[k] > m.threshold else dropped).append(r)
    return kept, dropped


class ManifestEntry(NamedTuple):
    epoch: int
    label: object
    item: object
    augmentation: AugmentationDescriptor


def balanced_manifest(
    records_by_class: Mapping[object, Sequence], seed: int, epochs: int = 1
) -> list[ManifestEntry]:
    """Per epoch, draw minority-class-size samples with replacement from every class,
    each paired with a freshly sampled augmentation."""
    if len(records_by_class) < 2:
        raise InputError("balanced sampling needs at least two classes")
    for label, items in records_by_class.items():
        if len(items) == 0:
            raise InputError(f"class {label!r} is empty")
    n_min = min(len(v) for v in records_by_class.values())
    rng = np.random.default_rng(seed)
    labels = sorted(records_by_class, key=str)
    out = []
    for epoch in range(epochs):
        for label in labels:
            items = records_by_class[label]
            draws = rng.integers(0, len(items), n_min)
            seeds = rng.integers(0, 2**63, n_min)
            out.extend(
                ManifestEntry(epoch, label, items[i], sample_descriptor(int(s)))
                for i, s in zip(draws, seeds)
            )
    return out


def write_manifest_jsonl(path, entries: Iterable[ManifestEntry]) -> None:
    lines = [
        f'{{"epoch": {e.epoch}, "label": {_json_scalar(e.label)}, "item": {_json_scalar(e.item)}, '
        f'"augmentation": {e.augmentation.to_json()}}}'
        for e in entries
    ]
    _io.write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _json_scalar(v):
    return json.dumps(v.item() if hasattr(v, "item") else v)


def aggregate_slide(records, T: float) -> dict[str, np.ndarray]:
    """Mean calibrated probability per slide.

    Rows sharing a patch_id (test-time augmentation variants) are averaged
    first, so each patch counts once.
    """
    if isinstance(records, Mapping):
        groups = records
    else:
        groups = defaultdict(list)
        for r in records:
            groups[r.slide_id].append(r)
    out = {}
    for slide, recs in groups.items():
        if not recs:
            raise InputError(f"slide {slide} has no records")
        per_patch = defaultdict(list)
        for r in recs:
            per_patch[r.patch_id].append(calibrated_confidence(r.z, T))
        out[slide] = np.mean([np.mean(v, axis=0) for v in per_patch.values()], axis=0)
    return out


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def read_logits(path) -> list[LogitRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in reader.fieldnames or () if c.startswith("z_")]
        if not cols or not {"patch_id", "slide_id", "label"} <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns patch_id,slide_id,label,z_0,...")
        cols.sort(key=lambda c: int(c[2:]))
        out = []
        for row in reader:
            label = row["label"].strip()
            out.append(LogitRecord(
                row["patch_id"], row["slide_id"],
                np.array([float(row[c]) for c in cols]),
                int(label) if label else None,
            ))
    return out


def write_logits(path, records: Sequence[LogitRecord]) -> None:
    k = max((r.z.size for r in records), default=0)
    with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "slide_id", "label"] + [f"z_{i}" for i in range(k)])
        for r in records:
            w.writerow([r.patch_id, r.slide_id, "" if r.label is None else r.label]
                       + [repr(float(v)) for v in r.z])
