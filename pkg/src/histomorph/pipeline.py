"""Stage DAG: tile -> normalize -> augment-manifest -> calibrate -> filter -> upscale
-> features -> train -> evaluate -> stats, with content-hash caching."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, _io
from .calibrate import (
    CalibrationModel,
    aggregate_slide,
    balanced_manifest,
    calibrated_confidence,
    filter_discriminative,
    fit_temperature,
    read_logits,
    write_logits,
    write_manifest_jsonl,
)
from .errors import HistomorphError, InputError, MissingArtifactError
from .forest import ABLATION_SUBSETS, ForestConfig, ablation_grid, train_forest
from .metrics import evaluate_scores, write_curve_csv
from .morpho import CONVENTIONS, FEATURE_NAMES, patch_features, read_features, write_features
from .plotting import emit_plots, group_violin
from .raster import (
    PATCH_SIZE,
    ManifestTileSource,
    Patch,
    build_tissue_mask,
    extract_patches,
    read_manifest,
    upscale_to_40x,
    write_manifest,
)
from .stain import StainModel, fit_stain_model, normalize
from .stats import mann_whitney_u, read_immune_scores

log = logging.getLogger(__name__)

STAGES = ("tile", "normalize", "augment-manifest", "calibrate", "filter", "upscale",
          "features", "train", "evaluate", "stats")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class Paths:
    tiles: str | None = None
    masks: str | None = None
    logits: str | None = None
    val_logits: str | None = None
    immune_scores: str | None = None
    output_dir: str = "out"


@dataclass
class TaskConfig:
    name: str
    logits: str
    val_logits: str
    labels: str


@dataclass
class StainConfig:
    lam: float = 0.1
    od_floor: float = 0.15
    reference: str | None = None
    coding_lambda: float = 0.01
    max_fit_pixels: int | None = 8192


@dataclass
class TissueConfig:
    min_tissue_fraction: float = 0.5
    thumbnail_scale: int = 16


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    tasks: list[TaskConfig] = field(default_factory=list)
    stain: StainConfig = field(default_factory=StainConfig)
    tissue: TissueConfig = field(default_factory=TissueConfig)
    threshold: float = 0.9
    forest: ForestConfig = field(default_factory=ForestConfig)
    augment_epochs: int = 1
    seed: int = 0
    workers: int | None = None
    failure_tolerance: float = 0.01

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise InputError("calibration threshold must lie in (0, 1)")
        if not 0 <= self.failure_tolerance <= 1:
            raise InputError("failure_tolerance must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys {sorted(unknown)}")
        return cls(
            paths=Paths(**d.pop("paths", {})),
            tasks=[TaskConfig(**t) for t in d.pop("tasks", [])],
            stain=StainConfig(**d.pop("stain", {})),
            tissue=TissueConfig(**d.pop("tissue", {})),
            forest=ForestConfig(**d.pop("forest", {})),
            **d,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        _io.write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file {path} not found")
        cfg = cls.from_dict(json.loads(path.read_text()))
        # relative paths resolve against the config file's directory
        base = path.parent
        for f in fields(Paths):
            v = getattr(cfg.paths, f.name)
            if v is not None and not os.path.isabs(v):
                setattr(cfg.paths, f.name, str(base / v))
        for t in cfg.tasks:
            for k in ("logits", "val_logits", "labels"):
                v = getattr(t, k)
                if not os.path.isabs(v):
                    setattr(t, k, str(base / v))
        return cfg

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def resolved_workers(self) -> int:
        env = os.environ.get("HISTOMORPH_WORKERS")
        if env:
            return max(1, int(env))
        return max(1, self.workers or os.cpu_count() or 1)


# --------------------------------------------------------------------------
# stage context
# --------------------------------------------------------------------------


@dataclass
class StageResult:
    stage: str
    status: int
    cached: bool
    outputs: list[str]
    n_items: int = 0
    n_failed: int = 0


class Context:
    def __init__(self, cfg: PipelineConfig, stage: str):
        self.cfg = cfg
        self.stage = stage
        self.out = Path(cfg.paths.output_dir)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.n_items = 0
        self.failures: list[dict] = []

    def dir(self, stage: str | None = None) -> Path:
        return self.out / (stage or self.stage)

    def need(self, path, what: str, producer: str | None = None) -> Path:
        """Register an input; missing inputs raise naming what produces them."""
        if path is None:
            raise MissingArtifactError(f"{self.stage}: config does not set {what}")
        path = Path(path)
        if not path.exists():
            hint = f"; run the '{producer}' stage first" if producer else ""
            raise MissingArtifactError(f"{self.stage}: missing {what} at {path}{hint}")
        if path.is_file():
            self.inputs.append(path)
        return path

    def produced(self, path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def map(self, fn: Callable, items: list) -> list:
        workers = min(self.cfg.resolved_workers(), max(1, len(items)))
        if workers <= 1 or len(items) < 2:
            return [fn(it) for it in items]
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))

    def fail(self, item: str, message: str) -> None:
        self.failures.append({"item": item, "error": message})

    def write_errors(self) -> None:
        path = self.produced(self.dir() / "errors.csv")
        with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["item", "error"])
            w.writeheader()
            w.writerows(sorted(self.failures, key=lambda r: r["item"]))


def _patch_rows(manifest: Path) -> list[dict]:
    rows = read_manifest(manifest)
    for r in rows:
        p = Path(r["path"])
        r["abspath"] = str(p if p.is_absolute() else manifest.parent / p)
    return rows


def _load_patch(row: dict) -> Patch:
    return Patch(row["slide_id"], row["patch_id"], int(row["x"]), int(row["y"]),
                 row["magnification"], _io.read_rgb(row["abspath"]))


def _read_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {r["slide_id"]: int(r["label"]) for r in csv.DictReader(fh)}


def _rows_for(patches_dir: Path, patches) -> list[dict]:
    return [{"slide_id": p.slide_id, "patch_id": p.patch_id, "path": f"patches/{p.filename}",
             "x": p.x, "y": p.y, "magnification": p.magnification} for p in patches]


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def _tile_slide(args):
    slide, rows, root, out_dir, min_frac, scale = args
    source = ManifestTileSource(slide, rows, root, cache=True)
    thumb = source.thumbnail(scale)
    mask = build_tissue_mask(thumb, min_frac, source.grid_shape)
    errors, written = [], []
    for patch in extract_patches(source, mask, errors):
        src = source.tile_path(patch.y // PATCH_SIZE, patch.x // PATCH_SIZE)
        _io.copy_or_write_png(src, Path(out_dir) / "patches" / patch.filename, patch.pixels)
        written.append(patch)
    failed = [(f"{slide}:{e.row},{e.col}", e.message) for e in errors]
    # unreadable tiles look like background in the thumbnail; report them rather than drop them
    failed += [(f"{slide}:{r},{c}", msg) for (r, c), msg in sorted(source.unreadable.items())]
    summary = {"grid": list(mask.shape), "tissue_cells": mask.n_tissue, "otsu_threshold": mask.threshold,
               "unreadable": len(source.unreadable)}
    return _rows_for(Path(out_dir), written), failed, summary


def stage_tile(ctx: Context):
    manifest = ctx.need(ctx.cfg.paths.tiles, "tile manifest (paths.tiles)")
    rows = read_manifest(manifest)
    for r in rows:
        p = Path(r["path"])
        ctx.inputs.append(p if p.is_absolute() else manifest.parent / p)
    by_slide = defaultdict(list)
    for r in rows:
        by_slide[r["slide_id"]].append(r)
    out = ctx.dir()
    jobs = [(s, by_slide[s], str(manifest.parent), str(out), ctx.cfg.tissue.min_tissue_fraction,
             ctx.cfg.tissue.thumbnail_scale) for s in sorted(by_slide)]
    results = ctx.map(_tile_slide, jobs)
    all_rows, summary = [], {}
    for (slide, *_), (prow, errs, summ) in zip(jobs, results):
        all_rows.extend(prow)
        summary[slide] = summ
        for item, msg in errs:
            ctx.fail(item, msg)
    ctx.n_items = sum(s["tissue_cells"] + s["unreadable"] for s in summary.values())
    for r in all_rows:
        ctx.produced(out / r["path"])
    write_manifest(ctx.produced(out / "manifest.csv"), all_rows)
    _io.write_json(ctx.produced(out / "tissue.json"), summary)


def _normalize_one(args):
    row, out_dir, target, scfg, seed = args
    try:
        patch = _load_patch(row)
        source = fit_stain_model(patch, scfg["lam"], scfg["od_floor"],
                                 max_pixels=scfg["max_fit_pixels"], seed=seed)
        out = normalize(patch, source, StainModel.from_dict(target), scfg["coding_lambda"])
        _io.write_png(Path(out_dir) / "patches" / out.filename, out.pixels)
        return row, source.to_dict(), None
    except (HistomorphError, OSError, ValueError) as exc:
        return row, None, str(exc)


def stage_normalize(ctx: Context):
    manifest = ctx.need(ctx.dir("tile") / "manifest.csv", "tiled patch manifest", "tile")
    rows = _patch_rows(manifest)
    if not rows:
        raise InputError("normalize: no patches were extracted")
    ctx.inputs.extend(Path(r["abspath"]) for r in rows)
    scfg = asdict(ctx.cfg.stain)
    ref_id = scfg["reference"] or rows[0]["patch_id"]
    ref = [r for r in rows if r["patch_id"] == ref_id]
    if not ref:
        raise InputError(f"normalize: reference patch {ref_id!r} is not in the patch manifest")
    target = fit_stain_model(_load_patch(ref[0]), scfg["lam"], scfg["od_floor"],
                             max_pixels=scfg["max_fit_pixels"], seed=ctx.cfg.seed)
    out = ctx.dir()
    _io.write_json(ctx.produced(out / "reference_stain.json"),
                   {"reference": ref_id, **target.to_dict()})
    jobs = [(r, str(out), target.to_dict(), scfg, ctx.cfg.seed) for r in rows]
    kept, models = [], {}
    for row, model, err in ctx.map(_normalize_one, jobs):
        if err is not None:
            ctx.fail(row["patch_id"], err)
            continue
        kept.append(row)
        models[row["patch_id"]] = model
        ctx.produced(out / "patches" / f"{row['patch_id']}.png")
    ctx.n_items = len(rows)
    new_rows = [{**r, "path": f"patches/{r['patch_id']}.png"} for r in kept]
    write_manifest(ctx.produced(out / "manifest.csv"), new_rows)
    _io.write_json(ctx.produced(out / "stain_models.json"), models)


def stage_augment_manifest(ctx: Context):
    manifest = ctx.need(ctx.dir("normalize") / "manifest.csv", "normalized patch manifest", "normalize")
    rows = read_manifest(manifest)
    if not ctx.cfg.tasks:
        raise InputError("augment-manifest: config defines no tasks")
    for task in ctx.cfg.tasks:
        labels = _read_labels(ctx.need(task.labels, f"{task.name} slide labels"))
        by_class = defaultdict(list)
        for r in rows:
            if r["slide_id"] in labels:
                by_class[labels[r["slide_id"]]].append(r["patch_id"])
        entries = balanced_manifest(dict(by_class), ctx.cfg.seed, ctx.cfg.augment_epochs)
        write_manifest_jsonl(ctx.produced(ctx.dir() / f"{task.name}_manifest.jsonl"), entries)
        ctx.n_items += len(entries)


def stage_calibrate(ctx: Context):
    sets = [("cancer", ctx.cfg.paths.val_logits, "paths.val_logits")]
    sets += [(t.name, t.val_logits, f"{t.name} validation logits") for t in ctx.cfg.tasks]
    for name, path, what in sets:
        model = fit_temperature(read_logits(ctx.need(path, what)), ctx.cfg.threshold)
        _io.write_json(ctx.produced(ctx.dir() / f"{name}.json"), model.to_dict())
        _io.write_json(ctx.produced(ctx.dir() / f"{name}_report.json"), model.report)
        log.info("calibrate %s: T=%.4f NLL %.4f -> %.4f, ECE %.4f -> %.4f", name, model.T,
                 model.report["nll_before"], model.report["nll_after"],
                 model.report["ece_before"], model.report["ece_after"])
        ctx.n_items += 1


def _load_calibration(ctx: Context, name: str) -> CalibrationModel:
    path = ctx.need(ctx.dir("calibrate") / f"{name}.json", f"{name} calibration", "calibrate")
    return CalibrationModel.from_dict(json.loads(path.read_text()))


def _parent_id(quadrant_id: str) -> str:
    return quadrant_id.rsplit("_q", 1)[0]


def _task_records(ctx: Context, task: TaskConfig, cd_ids: set[str]):
    labels = _read_labels(ctx.need(task.labels, f"{task.name} slide labels"))
    recs = [r for r in read_logits(ctx.need(task.logits, f"{task.name} logits"))
            if _parent_id(r.patch_id) in cd_ids]
    for r in recs:
        if r.label is None and r.slide_id in labels:
            r.label = labels[r.slide_id]
    return recs, labels


def stage_filter(ctx: Context):
    cancer = _load_calibration(ctx, "cancer")
    records = read_logits(ctx.need(ctx.cfg.paths.logits, "cancer-detection logits (paths.logits)"))
    kept, dropped = filter_discriminative(records, cancer)
    write_logits(ctx.produced(ctx.dir() / "cd_kept.csv"), kept)
    write_logits(ctx.produced(ctx.dir() / "cd_dropped.csv"), dropped)
    ctx.n_items = len(records)
    summary = {"cancer": {"n": len(records), "kept": len(kept),
                          "kept_fraction": len(kept) / max(1, len(records))}}
    cd_ids = {r.patch_id for r in kept}
    for task in ctx.cfg.tasks:
        model = _load_calibration(ctx, task.name)
        recs, _ = _task_records(ctx, task, cd_ids)
        bk, bd = filter_discriminative(recs, model)
        write_logits(ctx.produced(ctx.dir() / f"{task.name}_bd_kept.csv"), bk)
        write_logits(ctx.produced(ctx.dir() / f"{task.name}_bd_dropped.csv"), bd)
        summary[task.name] = {"n": len(recs), "kept": len(bk), "kept_fraction": len(bk) / max(1, len(recs))}
    _io.write_json(ctx.produced(ctx.dir() / "summary.json"), summary)


def _upscale_one(args):
    row, out_dir = args
    try:
        quads = upscale_to_40x(_load_patch(row))
        for q in quads:
            _io.write_png(Path(out_dir) / "patches" / q.filename, q.pixels)
        return row["patch_id"], _rows_for(Path(out_dir), quads), None
    except (HistomorphError, OSError, ValueError) as exc:
        return row["patch_id"], [], str(exc)


def stage_upscale(ctx: Context):
    kept_path = ctx.need(ctx.dir("filter") / "cd_kept.csv", "cancer-discriminative patch list", "filter")
    kept = {r.patch_id for r in read_logits(kept_path)}
    manifest = ctx.need(ctx.dir("normalize") / "manifest.csv", "normalized patch manifest", "normalize")
    rows = [r for r in _patch_rows(manifest) if r["patch_id"] in kept]
    for pid in sorted(kept - {r["patch_id"] for r in rows}):
        ctx.fail(pid, "discriminative patch has no normalized image")
    ctx.inputs.extend(Path(r["abspath"]) for r in rows)
    out = ctx.dir()
    all_rows = []
    for pid, qrows, err in ctx.map(_upscale_one, [(r, str(out)) for r in rows]):
        if err is not None:
            ctx.fail(pid, err)
        all_rows.extend(qrows)
    ctx.n_items = len(kept)
    for r in all_rows:
        ctx.produced(out / r["path"])
    write_manifest(ctx.produced(out / "manifest.csv"), all_rows)


def _mask_path(masks_dir: Path, patch_id: str) -> tuple[Path, int | None]:
    """Mask file for a patch and, for 40x quadrants without their own mask, the quadrant index."""
    direct = masks_dir / f"{patch_id}_mask.png"
    if direct.exists():
        return direct, None
    if "_q" in patch_id:
        parent, q = patch_id.rsplit("_q", 1)
        ppath = masks_dir / f"{parent}_mask.png"
        if ppath.exists() and q.isdigit() and int(q) < 4:
            return ppath, int(q)
    raise FileNotFoundError(f"no mask for {patch_id}: expected {direct}")


def _quadrant_mask(parent: np.ndarray, q: int) -> np.ndarray:
    """Nearest-neighbour 2x zoom of one quarter of a 20x label mask."""
    r, c = divmod(q, 2)
    h = PATCH_SIZE // 2
    quarter = parent[r * h:(r + 1) * h, c * h:(c + 1) * h]
    return np.repeat(np.repeat(quarter, 2, axis=0), 2, axis=1)


def _features_group(args):
    """Features for patches sharing one mask file (a 20x parent's four quadrants)."""
    rows, masks_dir = args
    out, decoded = [], {}
    for row in rows:
        pid = row["patch_id"]
        try:
            path, q = _mask_path(Path(masks_dir), pid)
            if path not in decoded:
                decoded[path] = _io.read_labels(path)
            mask = decoded[path] if q is None else _quadrant_mask(decoded[path], q)
            report = {}
            vec = patch_features(_load_patch(row), mask, report=report)
            out.append((pid, vec, report, None))
        except (HistomorphError, OSError, ValueError) as exc:
            out.append((pid, None, {}, str(exc)))
    return out


def stage_features(ctx: Context):
    manifest = ctx.need(ctx.dir("upscale") / "manifest.csv", "40x patch manifest", "upscale")
    masks_dir = ctx.need(ctx.cfg.paths.masks, "nuclei mask directory (paths.masks)")
    rows = _patch_rows(manifest)
    ctx.inputs.extend(Path(r["abspath"]) for r in rows)
    groups = defaultdict(list)
    for r in rows:
        try:
            path, _ = _mask_path(masks_dir, r["patch_id"])
            ctx.inputs.append(path)
        except FileNotFoundError:
            path = None
        groups[path or r["patch_id"]].append(r)
    vectors, skipped_small, empty = [], 0, []
    jobs = [(g, str(masks_dir)) for g in groups.values()]
    for results in ctx.map(_features_group, jobs):
        for pid, vec, report, err in results:
            if err is not None:
                ctx.fail(pid, err)
                continue
            skipped_small += report.get("skipped_small", 0)
            if vec is None:
                empty.append(pid)
            else:
                vectors.append(vec)
    ctx.n_items = len(rows)
    if rows and len(ctx.failures) == len(rows):
        raise MissingArtifactError(
            f"features: no usable masks under {masks_dir} (first error: {ctx.failures[0]['error']})"
        )
    write_features(ctx.produced(ctx.dir() / "features.csv"), vectors)
    _io.write_json(ctx.produced(ctx.dir() / "metadata.json"), {
        "conventions": CONVENTIONS, "columns": list(FEATURE_NAMES),
        "magnification": "40x", "n_patches": len(vectors),
        "patches_without_nuclei": sorted(empty), "nuclei_below_area_floor": skipped_small,
    })


def _feature_set(ctx: Context, task: TaskConfig):
    path = ctx.need(ctx.dir("features") / "features.csv", "feature table", "features")
    ids, slides, _, X = read_features(path)
    labels = _read_labels(ctx.need(task.labels, f"{task.name} slide labels"))
    bd_path = ctx.need(ctx.dir("filter") / f"{task.name}_bd_kept.csv",
                       f"{task.name} biomarker-discriminative list", "filter")
    bd = {r.patch_id for r in read_logits(bd_path)}
    known = np.array([s in labels for s in slides])
    y = np.array([labels.get(s, -1) for s in slides])
    in_bd = np.array([i in bd for i in ids]) & known
    return X, y, np.array(slides), known, in_bd


def _require_tasks(ctx: Context):
    if not ctx.cfg.tasks:
        raise InputError(f"{ctx.stage}: config lists no biomarker tasks")


def stage_train(ctx: Context):
    _require_tasks(ctx)
    fcfg = replace(ctx.cfg.forest, seed=ctx.cfg.seed)
    for task in ctx.cfg.tasks:
        X, y, slides, cd, bd = _feature_set(ctx, task)
        table = {}
        for name, sel in (("BD", bd), ("CD", cd)):
            rows = ablation_grid(X[sel], y[sel], fcfg, groups=slides[sel])
            table[name] = {r.subset: {**r.summary(), "n_samples": int(sel.sum())} for r in rows}
        model = train_forest(X[bd], y[bd], fcfg)
        ctx.produced(ctx.dir() / f"{task.name}_forest.json")
        _io.write_text(ctx.dir() / f"{task.name}_forest.json", model.to_json())
        _io.write_json(ctx.produced(ctx.dir() / f"{task.name}_importance.json"),
                       dict(zip(FEATURE_NAMES, model.importance.tolist())))
        _io.write_json(ctx.produced(ctx.dir() / f"{task.name}_ablation.json"), table)
        path = ctx.produced(ctx.dir() / f"{task.name}_ablation.csv")
        with _io.atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "n_features", "bd_auprc", "cd_auprc", "bd_auroc", "cd_auroc"])
            for sub in ABLATION_SUBSETS:
                b, c = table["BD"][sub], table["CD"][sub]
                w.writerow([sub, b["n_features"], f"{b['auprc']:.6f}", f"{c['auprc']:.6f}",
                            f"{b['auroc']:.6f}", f"{c['auroc']:.6f}"])
        ctx.n_items += 1


def stage_evaluate(ctx: Context):
    _require_tasks(ctx)
    kept = {r.patch_id for r in read_logits(
        ctx.need(ctx.dir("filter") / "cd_kept.csv", "cancer-discriminative patch list", "filter"))}
    for task in ctx.cfg.tasks:
        model = _load_calibration(ctx, task.name)
        recs, labels = _task_records(ctx, task, kept)
        recs = [r for r in recs if r.slide_id in labels]
        if not recs:
            raise InputError(f"evaluate: no labelled {task.name} records among discriminative patches")
        probs = calibrated_confidence(np.stack([r.z for r in recs]), model.T)[:, 1]
        patch_rep = evaluate_scores(probs, [labels[r.slide_id] for r in recs])
        slide_probs = aggregate_slide(recs, model.T)
        slides = sorted(slide_probs)
        slide_rep = evaluate_scores([slide_probs[s][1] for s in slides], [labels[s] for s in slides])
        out = ctx.dir()
        _io.write_json(ctx.produced(out / f"{task.name}_metrics.json"), {
            "patch": patch_rep.summary(), "slide": slide_rep.summary(),
            "n_patches": len(recs), "n_slides": len(slides), "temperature": model.T,
        })
        write_curve_csv(ctx.produced(out / f"{task.name}_patch_curve.csv"), patch_rep)
        write_curve_csv(ctx.produced(out / f"{task.name}_slide_curve.csv"), slide_rep)
        for p in emit_plots({"slide": slide_rep, "patch": patch_rep}, out, task.name):
            ctx.produced(p)
        ctx.n_items += 1


def stage_stats(ctx: Context):
    groups = read_immune_scores(ctx.need(ctx.cfg.paths.immune_scores, "immune scores (paths.immune_scores)"))
    missing = {"mutated", "non-mutated"} - set(groups)
    if missing:
        raise InputError(f"stats: immune score file lacks groups {sorted(missing)}")
    a, b = groups["mutated"], groups["non-mutated"]
    res = mann_whitney_u(a, b, alternative="greater")
    _io.write_json(ctx.produced(ctx.dir() / "immune_mwu.json"), {
        "U": res.U, "p_value": res.p_value, "method": res.method, "alternative": res.alternative,
        "n_mutated": int(a.size), "n_non_mutated": int(b.size),
    })
    group_violin({"mutated": a, "non-mutated": b}, ctx.produced(ctx.dir() / "immune_violin.svg"),
                 title="Immune score", annotation=f"Mann-Whitney p = {res.p_value:.3g}")
    ctx.n_items = int(a.size + b.size)


RUNNERS = {
    "tile": stage_tile,
    "normalize": stage_normalize,
    "augment-manifest": stage_augment_manifest,
    "calibrate": stage_calibrate,
    "filter": stage_filter,
    "upscale": stage_upscale,
    "features": stage_features,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "stats": stage_stats,
}


# --------------------------------------------------------------------------
# caching and orchestration
# --------------------------------------------------------------------------


def _versions() -> dict:
    import matplotlib
    import scipy
    import sklearn
    return {"histomorph": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "sklearn": sklearn.__version__, "matplotlib": matplotlib.__version__}


def _hash_files(paths) -> dict[str, str]:
    return {str(p): _io.file_sha256(p) for p in sorted(set(map(str, paths)))}


def _stage_key(stage: str, cfg: PipelineConfig, input_hashes: dict) -> str:
    blob = json.dumps({"stage": stage, "config": cfg.hash(), "inputs": input_hashes,
                       "versions": _versions()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _cache_hit(cache_file: Path, key: str, out_root: Path) -> list[str] | None:
    if not cache_file.exists():
        return None
    entry = json.loads(cache_file.read_text())
    if entry.get("key") != key:
        return None
    for rel, digest in entry["outputs"].items():
        p = out_root / rel
        if not p.exists() or _io.file_sha256(p) != digest:
            return None
    return list(entry["outputs"])


def _update_run_manifest(out_root: Path, stage: str, record: dict) -> None:
    path = out_root / "run_manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {"stages": {}}
    data["stages"][stage] = record
    _io.write_json(path, data)


def run_stage(stage: str, cfg: PipelineConfig, force: bool = False) -> list[StageResult]:
    """Run one stage (or ``"all"``); returns one result per executed stage."""
    if stage == "all":
        results = []
        for s in STAGES:
            res = run_stage(s, cfg, force)[0]
            results.append(res)
            if res.status != 0:
                break
        return results
    if stage not in RUNNERS:
        raise InputError(f"unknown stage {stage!r}; choose from {', '.join(STAGES + ('all',))}")

    out_root = Path(cfg.paths.output_dir)
    cache_file = out_root / ".cache" / f"{stage}.json"
    previous = None if force else _cached_inputs(cache_file)
    if previous is not None:
        key = _stage_key(stage, cfg, _hash_files(previous))
        hit = _cache_hit(cache_file, key, out_root)
        if hit is not None:
            log.info("%s: cache hit, nothing to do", stage)
            return [StageResult(stage, 0, True, hit)]

    ctx = Context(cfg, stage)
    RUNNERS[stage](ctx)
    if ctx.failures or stage in ("tile", "normalize", "upscale", "features"):
        ctx.write_errors()
    input_hashes = _hash_files(ctx.inputs)
    key = _stage_key(stage, cfg, input_hashes)
    outputs = {}
    for p in ctx.outputs:
        outputs[str(Path(p).relative_to(out_root))] = _io.file_sha256(p)
    _io.write_json(cache_file, {"key": key, "inputs": sorted(input_hashes), "outputs": outputs})

    n_failed = len(ctx.failures)
    rate = n_failed / ctx.n_items if ctx.n_items else 0.0
    status = 0 if rate <= cfg.failure_tolerance else 1
    _update_run_manifest(out_root, stage, {
        "config_hash": cfg.hash(), "inputs": input_hashes, "outputs": outputs,
        "versions": _versions(), "n_items": ctx.n_items, "n_failed": n_failed, "status": status,
    })
    if status:
        log.error("%s: %d of %d items failed (tolerance %.1f%%)", stage, n_failed, ctx.n_items,
                  100 * cfg.failure_tolerance)
    else:
        log.info("%s: done (%d items, %d failed)", stage, ctx.n_items, n_failed)
    return [StageResult(stage, status, False, sorted(outputs), ctx.n_items, n_failed)]


def _cached_inputs(cache_file: Path) -> list[str] | None:
    if not cache_file.exists():
        return None
    try:
        entry = json.loads(cache_file.read_text())
    except json.JSONDecodeError:
        return None
    inputs = entry.get("inputs")
    if inputs is None or not all(Path(p).exists() for p in inputs):
        return None
    return inputs
