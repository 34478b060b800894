"""Byte-deterministic SVG figures for curve reports and group comparisons."""

from __future__ import annotations

import contextlib
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import _io  # noqa: E402
from .errors import InputError  # noqa: E402
from .metrics import CurveReport  # noqa: E402

RC = {
    "svg.hashsalt": "histomorph",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "figure.figsize": (3.4, 3.2),
}
COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")


@contextlib.contextmanager
def _figure():
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        try:
            yield fig, ax
        finally:
            plt.close(fig)


def save_svg(fig, path) -> None:
    with _io.atomic_path(path) as tmp:
        fig.savefig(tmp, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches="tight")


def _check(reports: dict[str, CurveReport]):
    if not reports:
        raise InputError("no curve reports to plot")
    for name, rep in reports.items():
        if rep is None or len(rep.thresholds) == 0:
            raise InputError(f"curve {name!r} is empty")


def roc_figure(reports: dict[str, CurveReport]):
    fig, ax = plt.subplots()
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="0.5", gid="chance")
    for i, (name, rep) in enumerate(reports.items()):
        pts = rep.roc_points
        ax.plot(pts[:, 0], pts[:, 1], lw=1.4, color=COLORS[i % len(COLORS)],
                label=f"{name} (AUROC={rep.auroc:.3f})", gid=f"roc-{name}")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="False positive rate", ylabel="True positive rate",
           title="ROC")
    ax.legend(loc="lower right")
    return fig


def pr_figure(reports: dict[str, CurveReport]):
    fig, ax = plt.subplots()
    for i, (name, rep) in enumerate(reports.items()):
        color = COLORS[i % len(COLORS)]
        prevalence = rep.n_pos / (rep.n_pos + rep.n_neg)
        ax.axhline(prevalence, ls="--", lw=0.8, color=color, alpha=0.6, gid=f"baseline-{name}")
        pts = np.vstack([[0.0, rep.precision[0]], rep.pr_points])
        ax.step(pts[:, 0], pts[:, 1], where="pre", lw=1.4, color=color,
                label=f"{name} (AUPRC={rep.auprc:.3f})", gid=f"pr-{name}")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="Recall", ylabel="Precision", title="Precision-recall")
    ax.legend(loc="lower left")
    return fig


def mcc_f1_figure(reports: dict[str, CurveReport]):
    fig, ax = plt.subplots()
    ax.axhline(0.5, ls="--", lw=0.8, color="0.5", gid="chance")
    for i, (name, rep) in enumerate(reports.items()):
        pts = rep.mcc_f1_points
        ax.plot(pts[:, 0], pts[:, 1], lw=1.4, marker=".", ms=2, color=COLORS[i % len(COLORS)],
                label=f"{name} (MCC-F1={rep.mcc_f1:.3f})", gid=f"mccf1-{name}")
    ax.plot([1], [1], marker="*", color="k", ms=6, ls="none", gid="perfect")
    ax.set(xlim=(0, 1.02), ylim=(0, 1.02), xlabel="F1 score", ylabel="Unit-normalized MCC",
           title="MCC-F1")
    ax.legend(loc="lower right")
    return fig


def emit_plots(reports: dict[str, CurveReport], out_dir, prefix: str) -> list[Path]:
    """Write ``<prefix>_mcc_f1.svg``, ``<prefix>_roc.svg`` and ``<prefix>_pr.svg``."""
    _check(reports)
    out_dir = Path(out_dir)
    paths = []
    with plt.rc_context(RC):
        for kind, make in (("mcc_f1", mcc_f1_figure), ("roc", roc_figure), ("pr", pr_figure)):
            fig = make(reports)
            try:
                path = out_dir / f"{prefix}_{kind}.svg"
                save_svg(fig, path)
                paths.append(path)
            finally:
                plt.close(fig)
    return paths


def group_violin(groups: dict[str, np.ndarray], path, title: str = "", annotation: str = "") -> Path:
    """Violin plot of one scalar per sample, one violin per group."""
    if not groups or any(len(v) == 0 for v in groups.values()):
        raise InputError("every group needs at least one value")
    with _figure() as (fig, ax):
        names = list(groups)
        parts = ax.violinplot([groups[n] for n in names], showmedians=True)
        for body, color in zip(parts["bodies"], COLORS):
            body.set_facecolor(color)
            body.set_alpha(0.5)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_title(title)
        if annotation:
            ax.text(0.5, 0.97, annotation, transform=ax.transAxes, ha="center", va="top")
        save_svg(fig, path)
    return Path(path)
