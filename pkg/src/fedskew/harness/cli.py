"""Command-line entry point: ``fedskew {pipeline,ablation,ksweep,evaluate,partition}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ..data import load_idx
from ..errors import FedSkewError, StageError
from .config import load_config
from .pipeline import evaluate_checkpoint, load_datasets, partition_only, run_ablation, run_ksweep, run_pipeline
from .report import write_json

log = logging.getLogger("fedskew")


def _common(p: argparse.ArgumentParser, *, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, help="clients trained concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedskew", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="pre-train, unlearn client 0, recover, evaluate")
    _common(p)
    p.add_argument("--variant", help="recovery variant (overrides the config)")

    p = sub.add_parser("ablation", help="every variant at every alpha over the seed list")
    _common(p)

    p = sub.add_parser("ksweep", help="denoised recovery over the k grid")
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a test set")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", help="IDX test images (instead of the config's test split)")
    p.add_argument("--labels", help="IDX test labels")
    p.add_argument("--skewed-class", type=int)

    p = sub.add_parser("partition", help="write the partition manifest only")
    _common(p)
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, seeds=[args.seed])
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=str(Path(args.out).resolve()))
    return cfg.validate()


def _print_rows(header, rows) -> None:
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.4g}" if isinstance(v, float) else str(v) for v in r))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            return _evaluate(args)
        cfg = _config(args)
        if args.command == "pipeline":
            report = run_pipeline(cfg, variant=args.variant)
            for stage, body in report["stages"].items():
                f = body["final"]
                print(f"{stage:9s} overall={f['overall_accuracy']:.4f} balanced={f['balanced_accuracy']:.4f} "
                      f"skewed={f['skewed_class_accuracy']:.4f}")
            print(f"report: {Path(cfg.output_dir) / 'report.json'}")
        elif args.command == "ablation":
            from .pipeline import ABLATION_HEADER

            _print_rows(ABLATION_HEADER[:-1], [r[:-1] for r in run_ablation(cfg)])
        elif args.command == "ksweep":
            from .pipeline import KSWEEP_HEADER

            _print_rows(KSWEEP_HEADER, run_ksweep(cfg))
        elif args.command == "partition":
            part = partition_only(cfg)
            print(f"skewed class {part.skewed_class}; manifest: {Path(cfg.output_dir) / 'partition.json'}")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FedSkewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _evaluate(args) -> int:
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise SystemExit("--images and --labels go together")
        test = load_idx(args.images, args.labels)
        batch = 128
    elif args.config:
        cfg = _config(args)
        _, test, _ = load_datasets(cfg)
        batch = cfg.eval_batch_size
    else:
        raise SystemExit("evaluate needs --config or --images/--labels")
    try:
        report = evaluate_checkpoint(args.checkpoint, test, args.skewed_class, batch)
    except (FedSkewError, OSError) as exc:
        print(f"error: {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    d = report.to_dict()
    print(json.dumps({k: d[k] for k in ("overall_accuracy", "balanced_accuracy", "skewed_class_accuracy",
                                        "per_class_accuracy")}, indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "evaluation.json", {"checkpoint": str(args.checkpoint), **d})
    return 0


if __name__ == "__main__":
    sys.exit(main())
