"""Seconds-long end-to-end demo on Gaussian blobs: unstructured and structured compression."""

import argparse

from snnprune.cli import load_datasets, new_network
from snnprune.config import RunConfig
from snnprune.experiments import structured_flops
from snnprune.minimax import run_compression, train_baseline


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = RunConfig(arch="fc:64-256-4", dataset="synthetic", synthetic_features=64,
                    synthetic_n=1000, synthetic_test_n=200, timesteps=4, lr=1e-2, finetune_lr=1e-2,
                    epochs=3, prune_min_connections=0, budgets=[0.5, 0.25, 0.1, 0.05],
                    total_epochs=30, finetune_policy="fixed", finetune_epochs=1,
                    seed=args.seed).validate()
    train, test = load_datasets(cfg)
    net = new_network(cfg)
    train_baseline(cfg, net, train, test, echo=print)
    _, _, run = run_compression(cfg, net, train, test, echo=print)
    for b, it in run.reached.items():
        print(f"budget {b:g} reached at iteration {it}")

    res = structured_flops(0.5, seed=args.seed)
    print(f"structured: FLOPs ratio {res['flops_ratio']:.4f}, accuracy {res['acc']:.3f}, "
          f"columns removed {[len(c) for _, c, _ in res['columns']]}")


if __name__ == "__main__":
    main()
