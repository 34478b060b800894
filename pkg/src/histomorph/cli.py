"""Command-line entry point: ``histomorph <stage> --config <path>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import HistomorphError
from .pipeline import STAGES, PipelineConfig, run_stage


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histomorph", description="H&E patch analysis pipeline")
    p.add_argument("stage", choices=STAGES + ("all", "synth"),
                   help="pipeline stage to run; 'synth' writes a synthetic cohort instead")
    p.add_argument("--config", required=True, type=Path,
                   help="pipeline config (JSON); for 'synth', where the generated config is written")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="worker processes (HISTOMORPH_WORKERS overrides)")
    p.add_argument("--reference", metavar="PATCH_ID", help="stain reference patch for normalize")
    p.add_argument("--force", action="store_true", help="ignore cached stage outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("synth")
    g.add_argument("--slides", type=int, default=20)
    g.add_argument("--patches", type=int, default=50, help="patches per slide")
    g.add_argument("--effect", type=float, default=1.0, help="planted biomarker effect size")
    return p


def _synth(args) -> int:
    from .synth import generate_cohort, write_cohort
    seed = args.seed or 0
    cohort = generate_cohort(args.slides, args.patches, args.effect, seed=seed)
    path = write_cohort(cohort, args.config.parent, seed=seed)
    if path != args.config:
        args.config.write_text(path.read_text())
    print(f"wrote synthetic cohort config to {args.config}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.stage == "synth":
            return _synth(args)
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        if args.reference is not None:
            cfg.stain.reference = args.reference
        results = run_stage(args.stage, cfg, force=args.force)
    except HistomorphError as exc:
        print(f"histomorph: error: {exc}", file=sys.stderr)
        return 2
    for r in results:
        state = "cached" if r.cached else ("ok" if r.status == 0 else "FAILED")
        print(f"{r.stage:<17} {state:<7} items={r.n_items} failed={r.n_failed}")
    return max(r.status for r in results)


if __name__ == "__main__":
    sys.exit(main())
