"""One smoke epoch per task on the first tasks of each image-folder benchmark config.

With ``--data-root`` the real dataset tree is used (``ROOT/<domain>/<class>/*``);
otherwise a small stand-in tree with the config's class names is generated.
"""
import argparse
from pathlib import Path

from clamp.smoke import run_smoke

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
NAMES = ("office31_d_w", "officehome_ar_cl", "visda_syn_real", "domainnet_sk_cl")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", default=list(NAMES))
    p.add_argument("--data-root", default=None)
    p.add_argument("--tasks", type=int, default=2)
    p.add_argument("--resize", type=int, default=64)
    args = p.parse_args()
    for name in args.names:
        out = run_smoke(CONFIGS / f"{name}.json", args.data_root, args.tasks, args.resize)
        print(f"{name}: {out['num_tasks']} tasks, input {out['input_shape']}, rows {out['rows']}, "
              f"memory sizes {out['memory']}")


if __name__ == "__main__":
    main()
