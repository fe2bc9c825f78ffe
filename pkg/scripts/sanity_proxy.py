"""MNIST -> area-downsampled MNIST: an end-to-end sanity check that runs without USPS.

The target domain is the odd half of MNIST blurred to 16x16 and scaled back,
a mild stand-in shift. The numbers say nothing about MNIST/USPS accuracy;
they only show that the full CLAMP pipeline learns and that replay matters.

    python3 scripts/sanity_proxy.py --out runs/sanity --seeds 1
"""
import argparse
import logging
from pathlib import Path

from clamp.baselines import run_baseline
from clamp.config import AblationFlags, ExperimentConfig
from clamp.report import render_report
from clamp.trainer import build_streams, run_experiment

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "sanity_mnist_to_lowres.json"


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/sanity")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(CONFIG)
    if args.subsample:
        cfg.data.subsample = args.subsample
    if args.epochs:
        cfg = cfg.replace(epochs=args.epochs, pa_epochs=args.epochs // 2)
    streams = build_streams(cfg)
    out = Path(args.out)
    runs = [
        run_experiment(cfg, AblationFlags(), args.seeds, out / "clamp", resume=True, streams=streams).out_dir,
        run_baseline("naive", cfg, args.seeds, out / "naive", streams=streams).out_dir,
        run_experiment(cfg, AblationFlags.parse("pa,r1"), args.seeds, out / "baseline_3",
                       resume=True, streams=streams).out_dir,
    ]
    res = render_report(runs, out / "report")
    for row in res["rows"]:
        print(f"{row['method']:<14} {row['mean']:6.2f} ± {row['std']:.2f}")


if __name__ == "__main__":
    main()
