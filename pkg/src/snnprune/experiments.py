"""Desk-scale experiment protocols shared by ``scripts/`` and the acceptance suite.

* :func:`mnist_table` trains a 2-FC baseline on MNIST and compresses it
  through a budget list, reporting accuracy drops per sparsity level.
* :func:`zlr_iterations` counts the iterations each resource-dual learning
  rate needs to reach one budget, starting from the same baseline.
* :func:`scratch_vs_pretrained` compresses the same architecture from a
  random init and from the baseline.
* :func:`structured_flops` runs column pruning to a FLOPs budget on the
  synthetic blobs.
"""

from __future__ import annotations

import dataclasses
import math
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .cli import load_datasets, new_network
from .config import RunConfig
from .minimax import CompressionRun, network_from_checkpoint, train_baseline
from .resource import counted_sparsity, measured_resource

DESK_MNIST = dict(
    arch="fc:784-400-10", dataset="mnist", timesteps=4, optimizer="adam", lr=1e-3,
    epochs=20, budgets=[0.25, 0.05], total_epochs=20, finetune_policy="fixed",
    finetune_epochs=5, finetune_lr=1e-3, seed=0,
)


def desk_config(**overrides) -> RunConfig:
    return RunConfig(**{**DESK_MNIST, **overrides}).validate()


def _say(echo):
    return echo or (lambda msg: None)


def baseline(cfg: RunConfig, out_dir, echo=None, reuse: bool = True):
    """Train (or reload) the baseline in ``out_dir/baseline.ckpt``; returns ``(path, acc)``."""
    out_dir = Path(out_dir)
    path = out_dir / "baseline.ckpt"
    if reuse and path.exists():
        ck = load_checkpoint(path)
        if ck.meta.get("config") == cfg.items():
            return path, ck.meta["acc"]
    train, test = load_datasets(cfg)
    _, history = train_baseline(cfg, new_network(cfg), train, test, out_dir, _say(echo))
    return path, history[-1]["acc"]


def compress_from(cfg: RunConfig, baseline_path, out_dir, echo=None, data=None) -> CompressionRun:
    """Compress the network stored at ``baseline_path`` (``None`` means a fresh init)."""
    train, test = data or load_datasets(cfg)
    if baseline_path is None:
        net = new_network(cfg)
    else:
        net = network_from_checkpoint(load_checkpoint(baseline_path))
        for layer in net.layers:
            layer.prunable = layer.connections > cfg.prune_min_connections
        net.timesteps = cfg.timesteps
    out_dir = Path(out_dir)
    if (out_dir / "metrics.csv").exists():
        (out_dir / "metrics.csv").unlink()
    run = CompressionRun(cfg, net, train, test, out_dir, _say(echo))
    run.run()
    return run


def mnist_table(out_dir, echo=None, **overrides) -> dict:
    """Baseline plus one row per budget: sparsity, accuracy and drop in percentage points."""
    cfg = desk_config(**overrides)
    out_dir = Path(out_dir)
    start = time.perf_counter()
    base_path, base_acc = baseline(cfg, out_dir / "baseline", echo)
    run = compress_from(cfg, base_path, out_dir / "compress", echo)
    rows = []
    for budget in cfg.budgets:
        if budget not in run.checkpoints:
            rows.append({"budget": budget, "reached": False})
            continue
        ck = load_checkpoint(run.checkpoints[budget])
        net = network_from_checkpoint(ck)
        for layer, ref in zip(net.layers, run.net.layers):
            layer.prunable = ref.prunable
        rows.append({
            "budget": budget,
            "reached": True,
            "iteration": run.reached[budget],
            "sparsity": counted_sparsity(net, 0.0),
            "connectivity": measured_resource(run.rm, net),
            "acc": ck.meta["acc"],
            "drop_pp": 100.0 * (base_acc - ck.meta["acc"]),
        })
    return {"baseline_acc": base_acc, "rows": rows, "n": run.rm.n,
            "seconds": time.perf_counter() - start, "config": cfg.items()}


def zlr_iterations(baseline_path, zlrs=(1e3, 1e8), budget: float = 0.25, max_epochs: int = 3,
                   out_dir=None, echo=None, **overrides) -> dict:
    """Iterations until R(s) <= budget for each resource-dual rate (``inf`` if not within the cap)."""
    found = {}
    data = None
    for zlr in zlrs:
        cfg = desk_config(budgets=[budget], eta4=zlr, total_epochs=max_epochs,
                          finetune_epochs=0, **overrides)
        data = data or load_datasets(cfg)
        sub = Path(out_dir) / f"zlr_{zlr:g}" if out_dir else None
        run = CompressionRun(cfg, _load(baseline_path, cfg), *data, sub, _say(echo))
        run.run()
        found[zlr] = run.reached.get(budget, math.inf)
        _say(echo)(f"zlr {zlr:g}: {found[zlr]} iterations (cap {max_epochs * run.iters_per_epoch})")
    return found


def _load(path, cfg):
    net = network_from_checkpoint(load_checkpoint(path))
    for layer in net.layers:
        layer.prunable = layer.connections > cfg.prune_min_connections
    net.timesteps = cfg.timesteps
    return net


def scratch_vs_pretrained(out_dir, echo=None, **overrides) -> dict:
    """Final accuracy per budget when compressing from a fresh init versus the baseline."""
    cfg = desk_config(**overrides)
    out_dir = Path(out_dir)
    base_path, base_acc = baseline(cfg, out_dir / "baseline", echo)
    data = load_datasets(cfg)
    result = {"baseline_acc": base_acc}
    for label, src in (("pretrained", base_path), ("scratch", None)):
        run = compress_from(cfg, src, out_dir / label, echo, data)
        result[label] = {b: load_checkpoint(p).meta["acc"] for b, p in run.checkpoints.items()}
    return result


def structured_flops(budget: float = 0.5, echo=None, **overrides) -> dict:
    """Column pruning of a 2-layer net on the synthetic blobs, from a short baseline."""
    base = dict(arch="fc:64-256-4", dataset="synthetic", synthetic_features=64, synthetic_n=1000,
                synthetic_test_n=200, timesteps=4, lr=1e-2, finetune_lr=1e-2, epochs=3,
                structure="structured", resource="flops", budgets=[budget], eta4=1e2,
                total_epochs=10, finetune_policy="fixed", finetune_epochs=1)
    cfg = RunConfig(**{**base, **overrides}).validate()
    train, test = load_datasets(cfg)
    net = new_network(cfg)
    train_baseline(cfg, net, train, test, echo=_say(echo))
    run = CompressionRun(cfg, net, train, test, echo=_say(echo))
    run.run()
    columns = []
    for i, layer in enumerate(net.layers):
        if layer.prunable:
            zero_cols = np.flatnonzero(np.abs(layer.weight).sum(axis=0) == 0)
            columns.append((i, zero_cols, layer.weight))
    costs, total = run.rm.costs()
    return {
        "flops_ratio": measured_resource(run.rm, net),
        "column_share": float(costs.max()) / total,
        "columns": columns,
        "acc": run.history[-1]["acc"],
        "reached": run.reached,
        "config": dataclasses.asdict(cfg),
    }
