"""Iterations needed to reach one budget for several resource-dual learning rates.

Reuses (or trains) the desk baseline under OUT/baseline.
"""

import argparse
from pathlib import Path

from snnprune.experiments import baseline, desk_config, zlr_iterations


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/zlr")
    p.add_argument("--zlr", default="1e3,1e5,1e8", help="comma-separated values")
    p.add_argument("--budget", type=float, default=0.25)
    p.add_argument("--max-epochs", type=int, default=3)
    args = p.parse_args()

    echo = lambda m: print(m, flush=True)
    path, acc = baseline(desk_config(), Path(args.out) / "baseline", echo)
    print(f"baseline top-1 {100 * acc:.2f}%")
    zlrs = [float(z) for z in args.zlr.split(",")]
    found = zlr_iterations(path, zlrs, args.budget, args.max_epochs, out_dir=args.out, echo=echo)
    for z, n in found.items():
        print(f"zlr {z:>8g}: {n} iterations to R <= {args.budget:g}")


if __name__ == "__main__":
    main()
