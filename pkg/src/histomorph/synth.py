"""Synthetic H&E patches, label masks and cohorts with planted ground truth.

Everything is seed-deterministic. Cohorts are described up front and
rendered patch by patch, so a 1,000-patch cohort never sits in memory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io
from .calibrate import LogitRecord, write_logits
from .errors import CapacityError, InputError
from .morpho import NucleusRecord
from .raster import PATCH_SIZE, Patch, patch_name, write_manifest
from .stain import od_to_rgb

# hematoxylin / eosin colours in OD space (columns), distinct from the Ruifrok init;
# hematoxylin keeps the larger blue component
DEFAULT_STAIN_W = np.array([[0.60, 0.72, 0.36], [0.12, 0.96, 0.20]]).T
DEFAULT_STAIN_W = DEFAULT_STAIN_W / np.linalg.norm(DEFAULT_STAIN_W, axis=0)

MARGIN = 2.0
MAX_THROWS = 100_000
SHIFT_KEYS = ("radius", "elongation", "nuclear_eosin", "density")
# which feature group each shift key moves
SHIFT_GROUPS = {"radius": "morph", "elongation": "morph", "nuclear_eosin": "int", "density": "spat"}


@dataclass
class SynthSpec:
    n_nuclei: int = 20
    nucleus_radius_range: tuple[float, float] = (8.0, 13.0)
    elongation_range: tuple[float, float] = (1.0, 1.5)
    class_shift: dict = field(default_factory=dict)
    stain_W: np.ndarray = field(default_factory=lambda: DEFAULT_STAIN_W.copy())
    seed: int = 0
    hematoxylin: tuple[float, float] = (6.0, 0.15)  # gamma shape, scale per nucleus
    eosin: tuple[float, float] = (3.0, 0.12)  # gamma shape, scale per stroma pixel
    nuclear_eosin: float = 0.0
    white_fraction: float = 0.15
    slide_id: str = "synth"
    x: int = 0
    y: int = 0
    magnification: str = "20x"

    def __post_init__(self):
        lo, hi = self.nucleus_radius_range
        if not 0 < lo <= hi:
            raise InputError("nucleus radii must be positive with min <= max")
        if self.n_nuclei < 0:
            raise InputError("n_nuclei must be non-negative")
        unknown = set(self.class_shift) - set(SHIFT_KEYS)
        if unknown:
            raise InputError(f"unknown class_shift keys {sorted(unknown)}")
        W = np.asarray(self.stain_W, dtype=np.float64)
        if W.shape != (3, 2) or (W < 0).any() or not np.allclose(np.linalg.norm(W, axis=0), 1, atol=1e-9):
            raise InputError("stain_W must be a non-negative 3x2 matrix with unit columns")
        self.stain_W = W


def ellipse_perimeter(a: float, b: float) -> float:
    """Ramanujan's second approximation."""
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def _place(rng, semi_major: np.ndarray) -> np.ndarray:
    centers = []
    throws = 0
    for a in semi_major:
        while True:
            throws += 1
            if throws > MAX_THROWS:
                raise CapacityError(
                    f"could not place {len(semi_major)} nuclei after {MAX_THROWS} throws"
                )
            lo, hi = a + 1.0, PATCH_SIZE - 1.0 - a
            c = rng.uniform(lo, hi, 2)
            if all(math.dist(c, p) >= a + q + MARGIN for p, q in zip(centers, semi_major)):
                centers.append(c)
                break
    return np.array(centers).reshape(-1, 2)


def generate_patch(spec: SynthSpec):
    """Render one patch; return (Patch, uint16 label mask, ground-truth NucleusRecords)."""
    rng = np.random.default_rng(spec.seed)
    shift = spec.class_shift
    n = int(round(spec.n_nuclei * (1.0 + shift.get("density", 0.0))))
    r = rng.uniform(*spec.nucleus_radius_range, n) + shift.get("radius", 0.0)
    e = rng.uniform(*spec.elongation_range, n) + shift.get("elongation", 0.0)
    if (r <= 0).any() or (e < 1).any():
        raise InputError("class shift produced non-positive radii or elongation < 1")
    a, b = r * np.sqrt(e), r / np.sqrt(e)
    theta = rng.uniform(0, math.pi, n)
    conc_h = rng.gamma(*spec.hematoxylin, n)
    conc_e = np.full(n, spec.nuclear_eosin + shift.get("nuclear_eosin", 0.0))
    centers = _place(rng, a)

    s = PATCH_SIZE
    H = np.zeros((2, s, s))
    H[1] = rng.gamma(*spec.eosin, (s, s))
    H[1][rng.random((s, s)) < spec.white_fraction] = 0.0
    mask = np.zeros((s, s), dtype=np.uint16)
    truth = []
    for i in range(n):
        cx, cy = centers[i]
        ext = int(math.ceil(a[i])) + 1
        x0, x1 = max(0, int(cx) - ext), min(s, int(cx) + ext + 2)
        y0, y1 = max(0, int(cy) - ext), min(s, int(cy) + ext + 2)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dx, dy = xx - cx, yy - cy
        ct, st = math.cos(theta[i]), math.sin(theta[i])
        inside = ((dx * ct + dy * st) / a[i]) ** 2 + ((-dx * st + dy * ct) / b[i]) ** 2 <= 1.0
        mask[y0:y1, x0:x1][inside] = i + 1
        H[0, y0:y1, x0:x1][inside] = conc_h[i]
        H[1, y0:y1, x0:x1][inside] = conc_e[i]

        rgb = od_to_rgb(spec.stain_W @ np.array([[conc_h[i]], [conc_e[i]]]))[0].astype(float)
        area = math.pi * a[i] * b[i]
        perim = ellipse_perimeter(a[i], b[i])
        truth.append(NucleusRecord(
            nucleus_id=i + 1, centroid=(float(cx), float(cy)),
            minor_axis=2 * b[i], major_axis=2 * a[i], axis_ratio=a[i] / b[i],
            area=area, perimeter=perim, circularity=min(1.0, 4 * math.pi * area / perim**2),
            eccentricity=math.sqrt(1 - (b[i] / a[i]) ** 2), solidity=1.0,
            mean_r=rgb[0], mean_g=rgb[1], mean_b=rgb[2],
        ))

    pixels = od_to_rgb(spec.stain_W @ H.reshape(2, -1), (s, s, 3))
    pid = patch_name(spec.slide_id, spec.x, spec.y, spec.magnification)
    return Patch(spec.slide_id, pid, spec.x, spec.y, spec.magnification, pixels), mask, truth


# --------------------------------------------------------------------------
# cohort
# --------------------------------------------------------------------------

DEFAULT_CLASS_SHIFT = {"radius": 2.5, "nuclear_eosin": 0.25, "density": 0.5}


@dataclass
class PatchPlan:
    slide_id: str
    row: int
    col: int
    tumor: bool
    manifests: bool
    spec: SynthSpec

    @property
    def patch_id(self):
        return patch_name(self.slide_id, self.col * PATCH_SIZE, self.row * PATCH_SIZE, "20x")


@dataclass
class Cohort:
    slide_labels: dict[str, int]
    plans: list[PatchPlan]
    blank_cells: dict[str, list[tuple[int, int]]]
    cancer_logits: list[LogitRecord]
    cancer_val_logits: list[LogitRecord]
    task: str
    biomarker_logits: list[LogitRecord]
    biomarker_val_logits: list[LogitRecord]
    immune_scores: list[tuple[str, str, float]]
    temperatures: dict[str, float]
    cols: int

    def render(self, i: int):
        return generate_patch(self.plans[i].spec)


def _val_logits(rng, n, T, prefix, scale=2.5):
    """Validation logits whose labels are drawn from softmax(z_true); observed z = T * z_true."""
    margin = rng.normal(0.0, scale, n)
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-margin))).astype(int)
    return [LogitRecord(f"{prefix}{i:05d}", f"{prefix}slide{i % 10}",
                        np.array([0.0, T * m]), int(l)) for i, (m, l) in enumerate(zip(margin, labels))]


def generate_cohort(
    n_slides: int = 20,
    patches_per_slide: int = 50,
    biomarker_effect: float = 1.0,
    seed: int = 0,
    class_shift: dict | None = None,
    task: str = "tp53",
    tumor_fraction: float = 0.8,
    manifest_fraction: float = 0.6,
    cancer_temperature: float = 3.0,
    biomarker_temperature: float = 2.0,
    n_val: int = 4000,
    blank_per_slide: int = 2,
    n_nuclei: int = 20,
) -> Cohort:
    """Two-class cohort with class-conditional nucleus shifts and miscalibrated logits.

    Positive slides carry ``class_shift * biomarker_effect`` on a
    ``manifest_fraction`` of their tumour patches; the biomarker logits are
    confident exactly there, so biomarker-discriminative patches are enriched
    for the planted signal.
    """
    if biomarker_effect < 0:
        raise InputError("biomarker_effect must be non-negative")
    if n_slides < 2 or patches_per_slide < 1:
        raise InputError("need at least two slides and one patch per slide")
    shift = dict(DEFAULT_CLASS_SHIFT if class_shift is None else class_shift)
    shift = {k: v * biomarker_effect for k, v in shift.items()}
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n_slides)])
    rng.shuffle(labels)
    slide_ids = [f"S{i:03d}" for i in range(n_slides)]
    slide_labels = {s: int(l) for s, l in zip(slide_ids, labels)}

    cols = 8
    plans, blanks = [], {}
    cancer, bio = [], []
    for s, lab in slide_labels.items():
        for k in range(patches_per_slide + blank_per_slide):
            row, col = divmod(k, cols)
            if k >= patches_per_slide:
                blanks.setdefault(s, []).append((row, col))
                continue
            tumor = bool(rng.random() < tumor_fraction)
            manifests = bool(lab == 1 and tumor and rng.random() < manifest_fraction)
            spec = SynthSpec(
                n_nuclei=n_nuclei, class_shift=shift if manifests else {},
                seed=int(rng.integers(2**63)), slide_id=s, x=col * PATCH_SIZE, y=row * PATCH_SIZE,
            )
            plan = PatchPlan(s, row, col, tumor, manifests, spec)
            plans.append(plan)
            pid = plan.patch_id
            m = rng.normal(4.5, 1.0) if tumor else rng.normal(-1.0, 1.5)
            cancer.append(LogitRecord(pid, s, np.array([0.0, cancer_temperature * m]), 1))
            for q in range(4):
                if manifests:
                    mb = rng.normal(4.5, 1.0)
                elif tumor and lab == 0 and rng.random() < manifest_fraction:
                    mb = rng.normal(-4.5, 1.0)
                else:
                    mb = rng.normal(0.3 if lab else -0.3, 1.2)
                bio.append(LogitRecord(f"{pid}_q{q}", s, np.array([0.0, biomarker_temperature * mb]), lab))

    immune = []
    n_mut = max(3, n_slides)
    for i in range(2 * n_mut):
        mutated = i % 2 == 0
        score = rng.normal(600.0 * biomarker_effect if mutated else 0.0, 900.0)
        immune.append((f"GX{i:04d}", "mutated" if mutated else "non-mutated", float(score)))

    return Cohort(
        slide_labels, plans, blanks, cancer, _val_logits(rng, n_val, cancer_temperature, "cval"),
        task, bio, _val_logits(rng, n_val, biomarker_temperature, "bval"), immune,
        {"cancer": cancer_temperature, task: biomarker_temperature}, cols,
    )


def write_cohort(cohort: Cohort, root, seed: int = 0) -> Path:
    """Write tiles, masks, logits, labels, immune scores and a pipeline config.

    Returns the config path.
    """
    root = Path(root)
    tiles, masks = root / "tiles", root / "masks"
    rows = []
    for plan in cohort.plans:
        patch, mask, _ = generate_patch(plan.spec)
        _io.write_png(tiles / patch.filename, patch.pixels)
        _io.write_labels(masks / f"{patch.patch_id}_mask.png", mask)
        rows.append({"slide_id": patch.slide_id, "patch_id": patch.patch_id,
                     "path": f"{patch.filename}", "x": patch.x, "y": patch.y, "magnification": "20x"})
    white = np.full((PATCH_SIZE, PATCH_SIZE, 3), 255, dtype=np.uint8)
    for s, cells in cohort.blank_cells.items():
        for row, col in cells:
            pid = patch_name(s, col * PATCH_SIZE, row * PATCH_SIZE, "20x")
            _io.write_png(tiles / f"{pid}.png", white)
            rows.append({"slide_id": s, "patch_id": pid, "path": f"{pid}.png",
                         "x": col * PATCH_SIZE, "y": row * PATCH_SIZE, "magnification": "20x"})
    rows.sort(key=lambda r: (r["slide_id"], int(r["y"]), int(r["x"])))
    write_manifest(tiles / "manifest.csv", rows)

    write_logits(root / "cancer_logits.csv", cohort.cancer_logits)
    write_logits(root / "cancer_val_logits.csv", cohort.cancer_val_logits)
    write_logits(root / f"{cohort.task}_logits.csv", cohort.biomarker_logits)
    write_logits(root / f"{cohort.task}_val_logits.csv", cohort.biomarker_val_logits)
    _write_csv(root / f"{cohort.task}_labels.csv", ["slide_id", "label"],
               sorted(cohort.slide_labels.items()))
    _write_csv(root / "immune_scores.csv", ["sample_id", "group", "immune_score"],
               [(a, b, repr(c)) for a, b, c in cohort.immune_scores])

    from .pipeline import PipelineConfig, TaskConfig
    # paths relative to the config file keep the cohort directory relocatable
    cfg = PipelineConfig(seed=seed)
    cfg.paths.tiles = "tiles/manifest.csv"
    cfg.paths.masks = "masks"
    cfg.paths.logits = "cancer_logits.csv"
    cfg.paths.val_logits = "cancer_val_logits.csv"
    cfg.paths.immune_scores = "immune_scores.csv"
    cfg.paths.output_dir = "out"
    t = cohort.task
    cfg.tasks = [TaskConfig(name=t, logits=f"{t}_logits.csv", val_logits=f"{t}_val_logits.csv",
                            labels=f"{t}_labels.csv")]
    path = root / "config.json"
    cfg.save(path)
    return path


def _write_csv(path, header, rows):
    with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
