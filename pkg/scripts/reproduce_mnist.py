"""Desk-scale MNIST run: 2-FC baseline, then compression to 75% and 95% sparsity.

    SNNPRUNE_DATA_DIR=/path/to/mnist python scripts/reproduce_mnist.py --out runs/mnist
"""

import argparse
import json
from pathlib import Path

from snnprune.experiments import DESK_MNIST, mnist_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/mnist")
    p.add_argument("--budgets", default="0.25,0.05", help="comma-separated connectivity ratios")
    p.add_argument("--epochs", type=int, default=DESK_MNIST["epochs"])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    budgets = [float(b) for b in args.budgets.split(",")]
    result = mnist_table(args.out, echo=lambda m: print(m, flush=True), budgets=budgets,
                         epochs=args.epochs, seed=args.seed)
    print(f"\nbaseline top-1 {100 * result['baseline_acc']:.2f}%")
    print(f"{'budget':>8} {'sparsity':>9} {'top-1':>7} {'drop':>7} {'iter':>6}")
    for r in result["rows"]:
        if not r["reached"]:
            print(f"{r['budget']:>8g}   not reached")
            continue
        print(f"{r['budget']:>8g} {100 * r['sparsity']:>8.2f}% {100 * r['acc']:>6.2f}% "
              f"{-r['drop_pp']:>+6.2f} {r['iteration']:>6}")
    print(f"wall clock {result['seconds'] / 60:.1f} min")
    Path(args.out, "table.json").write_text(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
