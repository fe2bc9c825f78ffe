"""Run the digit-benchmark protocols behind acceptance criteria 1-6, then print verdicts.

    python3 scripts/run_acceptance_experiments.py            # all of 1-6
    python3 scripts/run_acceptance_experiments.py 1 3 --root runs/acceptance

Needs MNIST and USPS under $CLAMP_DATA_DIR (default ~/.cache/clamp/data).
Finished runs are skipped and interrupted ones resume, so the script can be
re-invoked until everything has completed.
"""
import argparse
import logging
import sys

import torch

from clamp import protocols


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("criteria", nargs="*", type=int, default=sorted(protocols.PLAN))
    p.add_argument("--root", default=None, help="results root (default $CLAMP_ACCEPTANCE_RUNS or runs/acceptance)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--check-only", action="store_true", help="only read existing runs")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    problem = protocols.usps_problem()
    if problem and not args.check_only:
        print(f"cannot run the digit protocols: {problem}", file=sys.stderr)
        return 2
    ok = True
    for c in args.criteria:
        if not args.check_only:
            protocols.run_protocol(c, args.root)
        v = protocols.check(c, args.root)
        ok &= v.passed
        print(f"{'PASS' if v.passed else 'FAIL'}  criterion {c}: {v.message}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
