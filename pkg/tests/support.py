"""Small synthetic setups shared by the slower tests."""

from snnprune.cli import load_datasets, new_network
from snnprune.config import RunConfig


def synthetic_cfg(**overrides) -> RunConfig:
    base = dict(
        arch="fc:64-256-4", dataset="synthetic", synthetic_features=64, synthetic_n=1000,
        synthetic_test_n=200, timesteps=4, lr=1e-2, finetune_lr=1e-2, epochs=3,
        prune_min_connections=0, total_epochs=30, finetune_policy="fixed", finetune_epochs=1,
        budgets=[0.5, 0.25, 0.1, 0.05],
    )
    base.update(overrides)
    return RunConfig(**base).validate()


def synthetic_setup(**overrides):
    cfg = synthetic_cfg(**overrides)
    train, test = load_datasets(cfg)
    return cfg, new_network(cfg), train, test
