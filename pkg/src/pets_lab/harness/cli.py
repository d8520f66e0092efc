"""Command-line entry point: ``pets-lab <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from pets_lab.harness.config import load_config
from pets_lab.harness.io import Checkpoint, export_curves
from pets_lab.harness.selfcheck import run_selfcheck
from pets_lab.harness import training


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ckpt = training.pretrain_source(cfg)
    ckpt.save(args.out)
    report = training.evaluate_params(ckpt.params, training.source_eval_split(cfg), cfg)
    print(f"source mAP@0.5 = {report.map50:.4f}; checkpoint written to {args.out}")
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = training.adapt(cfg, Checkpoint.load(args.source))
    export_curves(result.curves, out / "curves.csv")
    result.final.save(out / "checkpoint.json")
    report = training.evaluate_params(result.final.params, training.target_eval_split(cfg), cfg)
    _write_json(
        out / "report.json",
        {
            "config": cfg.to_dict(),
            "dynamic_teacher": report.to_dict(),
            "final_map50": {role: result.final_map(role) for role in ("student", "static_teacher", "dynamic_teacher")},
            "warnings": result.warnings,
        },
    )
    print(f"final dynamic-teacher mAP@0.5 = {report.map50:.4f}; outputs in {out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    source = Checkpoint.load(args.source)

    def save_curves(row: str, seed: int, result: training.AdaptResult) -> None:
        export_curves(result.curves, out / f"curves_{row}_seed{seed}.csv")

    rows = training.run_ablation(cfg, source, seeds=seeds, on_result=save_curves)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "seed", "final_map50", "max_drawdown"])
        for r in rows:
            writer.writerow([r.row, r.seed, repr(r.final_map50), repr(r.max_drawdown)])
    summary = training.summarize_ablation(rows)
    _write_json(out / "summary.json", {"seeds": seeds, "median_final_map50": summary})
    for row, value in summary.items():
        print(f"{row:10s} {value:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ckpt = Checkpoint.load(args.ckpt)
    split = training.source_eval_split(cfg) if args.split == "source" else training.target_eval_split(cfg)
    report = training.evaluate_params(ckpt.params, split, cfg)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_selfcheck(args: argparse.Namespace) -> int:
    results = run_selfcheck(args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pets-lab", description="Teacher-student adaptation lab on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the source detector")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a source checkpoint to the fogged target")
    p.add_argument("--config", default=None)
    p.add_argument("--source", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run every flow strategy and single-teacher mode")
    p.add_argument("--config", default=None)
    p.add_argument("--source", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", choices=("target", "source"), default="target")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run the oracle self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
