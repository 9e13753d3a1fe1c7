"""Command line entry point: ``eedlab <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import STAGES, StageError, run_pipeline, run_stage
from .report import load_report, to_csv

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

COMMANDS = {
    "pretrain": "adversarially train the dense base model",
    "prune-pool": "prune the base model into the sub-model pool",
    "select": "build the failure matrix and pick a team by robust diversity",
    "train-eed": "train the selected team with the EED loss",
    "eval": "evaluate base, pool, team and DIE; write metrics.json/.csv",
    "die-eval": "run dynamic inference on the test set only",
    "run-all": "every stage in order (or up to --stage)",
    "report": "print the metrics of a finished run",
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--stage", choices=STAGES, help="run-all: last stage to run")
    common.add_argument("--attack", choices=("fgsm", "pgd"), help="evaluate only this attack")
    common.add_argument("--epsilon", type=float, metavar="F", help="l_inf budget")
    common.add_argument("--sparsity", type=float, metavar="F", help="global target sparsity")
    common.add_argument("--die", choices=("online", "exhaustive", "off"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser = argparse.ArgumentParser(prog="eedlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name == "report":
            sp.add_argument("--format", choices=("table", "json", "csv"), default="table")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.out is not None:
        out["out"] = args.out
    if args.attack is not None:
        out["eval.attacks"] = args.attack
    if args.epsilon is not None:
        out["attack.epsilon"] = repr(args.epsilon)
    if args.sparsity is not None:
        out["prune.target_sparsity"] = repr(args.sparsity)
    if args.die is not None:
        out["die.mode"] = args.die
    return out


def _print_table(report, stream):
    cols = ["clean"] + list(report.attacks)
    stream.write(f"{'entity':<10} {'kind':<9} " + " ".join(f"{c:>7}" for c in cols)
                 + f" {'sparsity':>8}\n")
    for e in report.entities:
        vals = [e.clean] + [e.robust[a] for a in report.attacks]
        stream.write(f"{e.name:<10} {e.kind:<9} " + " ".join(f"{v:7.4f}" for v in vals)
                     + f" {e.sparsity:8.4f}\n")
    stream.write(f"team {report.team}  RD {report.rd}  global sparsity "
                 f"{report.global_sparsity:.4f}\n")
    if report.die:
        stream.write(f"DIE ({report.die['mode']}): mean stop {report.die['mean_stop']}  "
                     f"speedup {report.die['speedup']}\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "report":
            path = Path(cfg.out) / "metrics.json"
            if not path.is_file():
                raise ConfigError(f"no metrics.json in {cfg.out}")
            report = load_report(path)
            if args.format == "json":
                sys.stdout.write(path.read_text())
            elif args.format == "csv":
                sys.stdout.write(to_csv(report))
            else:
                _print_table(report, sys.stdout)
            return EXIT_OK
        if args.command == "run-all":
            if args.stage is None:
                report = run_pipeline(cfg)
                _print_table(report, sys.stdout)
                return EXIT_OK
            for stage in STAGES[:STAGES.index(args.stage) + 1]:
                if stage != "die-eval":
                    run_stage(cfg, stage)
            return EXIT_OK
        result = run_stage(cfg, args.command)
        if args.command == "eval":
            _print_table(result, sys.stdout)
        elif args.command in ("select", "die-eval"):
            summary = result["chosen"] if args.command == "select" else result
            sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
        return EXIT_OK
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except StageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
