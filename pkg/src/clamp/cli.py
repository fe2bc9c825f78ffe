"""Command line: ``clamp run | baseline | ablation | report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import AblationFlags, ExperimentConfig
from .data import ConfigurationError, DatasetUnavailable

OVERRIDES = {
    # flag: (trainer field, type)
    "--epochs": ("epochs", int),
    "--pa-epochs": ("pa_epochs", int),
    "--inner-steps": ("n_inner", int),
    "--outer-steps": ("n_outer", int),
    "--inner-lr": ("inner_lr", float),
    "--outer-lr": ("outer_lr", float),
    "--adversarial-lr": ("adversarial_lr", float),
    "--batch-size": ("batch_size", int),
    "--pseudo-threshold": ("pseudo_threshold", float),
    "--val-per-class": ("val_per_class", int),
    "--mem-per-class": ("mem_per_class", int),
    "--seed": ("seed", int),
}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--seeds", type=int, default=1, help="number of repeats (seed, seed+1, ...)")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the last task boundary")
    p.add_argument("--data-dir", default=None, help="digit cache dir, or dataset root for image folders")
    p.add_argument("--subsample", type=int, default=None, help="cap samples per task")
    p.add_argument("--interleave-pa", action="store_true",
                   help="run adversarial adaptation in every epoch instead of the first pa_epochs")
    for flag, (_, kind) in OVERRIDES.items():
        p.add_argument(flag, type=kind, default=None)


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    doc = cfg.to_dict()
    for flag, (name, _) in OVERRIDES.items():
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is not None:
            doc["trainer"][name] = value
    if args.interleave_pa:
        doc["trainer"]["interleave_pa"] = True
    if args.data_dir:
        key = "root" if doc["data"]["kind"] == "image_folder" else "data_dir"
        doc["data"][key] = args.data_dir
    if args.subsample:
        doc["data"]["subsample"] = args.subsample
    return ExperimentConfig.from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clamp", description="cross-domain continual learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    _add_common(run)
    run.add_argument("--flags", default="pa,pl,meta,r1,r2",
                     help="enabled mechanisms among pa,pl,meta,r1,r2 ('none' for naive)")

    base = sub.add_parser("baseline", help="naive, dann or joint reference learner")
    _add_common(base)
    base.add_argument("--kind", required=True, choices=["naive", "dann", "joint"])

    abl = sub.add_parser("ablation", help="all eight ablation rows")
    _add_common(abl)

    rep = sub.add_parser("report", help="tables and figures from run directories")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out", default=None)
    rep.add_argument("--log-base", type=float, default=None, help="entropy log base (default e)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "report":
            from .report import render_report
            res = render_report(args.runs, args.out, log_base=args.log_base)
            print(f"report written to {res['out_dir']}")
            return 0
        cfg = load_config(args)
        if args.command == "run":
            from .trainer import run_experiment
            res = run_experiment(cfg, AblationFlags.parse(args.flags), args.seeds, args.out,
                                 resume=args.resume)
            s = res.summary
            print(json.dumps({"run_dir": str(res.out_dir), "mean": s.mean_accuracy,
                              "std": s.std_accuracy, "seeds": s.seeds}))
        elif args.command == "baseline":
            from .baselines import run_baseline
            res = run_baseline(args.kind, cfg, args.seeds, args.out)
            print(json.dumps({"run_dir": str(res.out_dir), "mean": res.summary.mean_accuracy,
                              "std": res.summary.std_accuracy}))
        else:
            from .trainer import run_ablation_suite
            table = run_ablation_suite(cfg, args.seeds, args.out or f"runs/{cfg.name}-ablation")
            for row in table:
                print(f"{row['method']:<12} {row['flags']:<18} {100 * row['mean']:6.2f} ± {100 * row['std']:.2f}")
    except DatasetUnavailable as e:
        print(f"dataset unavailable: {e}", file=sys.stderr)
        return 2
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
