"""Command line entry point: ``diep <subcommand> --config run.yaml ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .exceptions import DiEPError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diep", description="Differentiable expert pruning lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, model=True, mask=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", "-c", type=Path, help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--out", "-o", type=Path, help="output directory (overrides config output_dir)")
        if model:
            sp.add_argument("--model", "-m", type=Path, help="model artifact; pretrained from config if omitted")
        if mask:
            sp.add_argument("--mask", type=Path, help="prune report whose mask to apply")
        return sp

    add("pretrain", "generate the task, plant redundancy, pretrain and save the model", model=False)
    add("prune", "search importance scores (or run a baseline) and prune")
    ev = add("eval", "held-out accuracy, perplexity, fidelity and routing frequencies", mask=True)
    ev.add_argument("--skip", action=argparse.BooleanOptionalAction, default=None,
                    help="enable adaptive skipping (default: config skipping.enabled)")
    an = add("analyze", "CKA heatmaps and alpha/beta dumps as CSV")
    an.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
    an.add_argument("--scores", type=Path, help="prune report providing alpha/beta (search runs otherwise)")
    add("skip-calibrate", "calibrate per-layer skip thresholds", mask=True)
    sw = add("sweep", "cross product of r, lam, calibration size and method")
    sw.add_argument("--grid", type=Path, required=True,
                    help="YAML mapping with lists for r, lam, calibration (or 'preset'), method")
    sub.add_parser("show-config", help="print the fully defaulted config").add_argument(
        "--config", "-c", type=Path)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
        if args.command == "show-config":
            sys.stdout.write(yaml.safe_dump(config.to_dict(), sort_keys=False))
            return 0
        out = getattr(args, "out", None)
        model = getattr(args, "model", None)
        if args.command == "pretrain":
            report = harness.cmd_pretrain(config, out_dir=out)
            summary = {"model_digest": report["digests"]["model"], **report["pretrain"]}
            summary.pop("losses")
        elif args.command == "prune":
            report = harness.cmd_prune(config, model_path=model, out_dir=out)
            summary = {"pruned": report["decision"]["pruned"], **report["eval"]}
            summary.pop("frequency")
        elif args.command == "eval":
            report = harness.cmd_eval(config, model_path=model, mask_path=args.mask, skip=args.skip, out_dir=out)
            summary = {k: v for k, v in report["eval"].items() if k != "frequency"}
        elif args.command == "analyze":
            report = harness.cmd_analyze(config, model_path=model, out_dir=out, kernel=args.kernel,
                                         scores_from=args.scores)
            summary = {"files": report["files"]}
        elif args.command == "skip-calibrate":
            report = harness.cmd_skip_calibrate(config, model_path=model, mask_path=args.mask, out_dir=out)
            summary = {"gamma": report["thresholds"]["gamma"],
                       **report["eval"]["skip"]["comparison"]}
        else:
            grid = yaml.safe_load(args.grid.read_text(encoding="utf-8")) or {}
            if not isinstance(grid, dict):
                raise harness.ConfigError("grid", "must be a mapping of axis -> list")
            rows = harness.cmd_sweep(config, grid, model_path=model, out_dir=out)
            summary = {"rows": len(rows), "failed": sum(bool(r.get("error")) for r in rows)}
    except (DiEPError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
