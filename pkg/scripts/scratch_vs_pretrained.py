"""Compress from a random init and from the trained baseline; compare accuracy per budget."""

import argparse

from snnprune.experiments import scratch_vs_pretrained


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/scratch")
    args = p.parse_args()
    res = scratch_vs_pretrained(args.out, echo=lambda m: print(m, flush=True))
    print(f"baseline top-1 {100 * res['baseline_acc']:.2f}%")
    for b in sorted(res["pretrained"], reverse=True):
        scratch = res["scratch"].get(b)
        print(f"budget {b:g}: pretrained {100 * res['pretrained'][b]:.2f}%  "
              f"scratch {'n/a' if scratch is None else f'{100 * scratch:.2f}%'}")


if __name__ == "__main__":
    main()
