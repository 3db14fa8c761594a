"""Command line: ``train``, ``compress``, ``eval`` and ``export-metrics``.

Settings come from ``--config FILE`` (flat ``key = value``) and any number of
``--key=value`` overrides; overrides win. Exit codes: 0 ok, 1 configuration
or input error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_pairs
from .data import load_mnist, synthetic_dataset
from .metrics import read_metrics
from .minimax import CompressionRun, NumericError, network_from_checkpoint, train_baseline
from .resource import build_resource_model, counted_sparsity, layer_table, measured_resource
from .snn import LifParams, accuracy, build_network
from .tensor import DimensionError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _echo(msg: str):
    print(msg, flush=True)


def load_datasets(cfg: RunConfig):
    if cfg.dataset == "synthetic":
        kw = dict(classes=cfg.synthetic_classes, features=cfg.synthetic_features, spread=cfg.synthetic_spread)
        train = synthetic_dataset(cfg.seed, cfg.synthetic_n, split="train", **kw)
        test = synthetic_dataset(cfg.seed, cfg.synthetic_test_n, split="test", **kw)
    else:
        train = load_mnist(cfg.data_dir or None, "train")
        test = load_mnist(cfg.data_dir or None, "test")
    if cfg.train_limit:
        train = train.subset(cfg.train_limit)
    return train, test


def new_network(cfg: RunConfig):
    rng = np.random.default_rng([cfg.seed, 1])
    return build_network(cfg.arch, rng, timesteps=cfg.timesteps,
                         lif=LifParams(cfg.tau_m, cfg.v_rest, cfg.v_th), bias=cfg.bias,
                         init_gain=cfg.init_gain, prune_min_connections=cfg.prune_min_connections,
                         detach_reset=cfg.detach_reset)


def _check_shapes(net, train):
    if int(np.prod(net.in_shape)) != train.features:
        raise DimensionError(f"model expects {int(np.prod(net.in_shape))} input features, "
                             f"dataset has {train.features}")
    if net.n_classes < train.classes:
        raise DimensionError(f"model has {net.n_classes} outputs for {train.classes} classes")


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    train, test = load_datasets(cfg)
    net = new_network(cfg)
    _check_shapes(net, train)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    net, history = train_baseline(cfg, net, train, test, out, echo=_echo)
    print(f"baseline accuracy {history[-1]['acc']:.4f} -> {out / 'baseline.ckpt'}")
    return history[-1]


def cmd_compress(cfg: RunConfig, out: Path, resume: bool = False) -> dict:
    train, test = load_datasets(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    if resume:
        last = out / "last.ckpt"
        if not last.exists():
            raise FileNotFoundError(f"nothing to resume: {last} does not exist")
        run = CompressionRun.resume(last, cfg, train, test, out, echo=_echo)
    else:
        if cfg.pretrained_path:
            path = Path(cfg.pretrained_path)
            if not path.exists():
                raise FileNotFoundError(f"pretrained baseline {path} not found; run `train` first")
            net = network_from_checkpoint(load_checkpoint(path))
            for layer in net.layers:
                layer.prunable = layer.connections > cfg.prune_min_connections
            net.timesteps = cfg.timesteps
        else:
            net = new_network(cfg)
        _check_shapes(net, train)
        metrics = out / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
        run = CompressionRun(cfg, net, train, test, out, echo=_echo)
    run.run()
    for b, path in run.checkpoints.items():
        print(f"budget {b:g}: {path}")
    return run.history[-1] if run.history else {}


def checkpoint_config(ck, overrides=()) -> RunConfig:
    """The run config stored in a checkpoint, with ``overrides`` applied on top."""
    saved = ck.meta.get("config") or {}
    pairs = [(k, ",".join(map(repr, v)) if isinstance(v, list) else str(v)) for k, v in saved.items()]
    return parse_pairs(list(overrides), parse_pairs(pairs)).validate()


def cmd_eval(checkpoint: Path, cfg: RunConfig | None = None) -> dict:
    ck = load_checkpoint(checkpoint)
    cfg = cfg or checkpoint_config(ck)
    net = network_from_checkpoint(ck)
    _, test = load_datasets(cfg)
    _check_shapes(net, test)
    acc = accuracy(net, test.inputs, test.labels)
    kind = ck.meta.get("config", {}).get("resource", cfg.resource)
    structured = ck.meta.get("config", {}).get("structure", cfg.structure) == "structured"
    rm = build_resource_model(net, kind, structured)
    report = {
        "checkpoint": str(checkpoint),
        "tag": ck.meta.get("tag"),
        "accuracy": acc,
        "counted_sparsity": counted_sparsity(net, 0.0),
        "resource_kind": rm.kind,
        "resource": measured_resource(rm, net),
        "layers": layer_table(net),
    }
    print(f"checkpoint {checkpoint} (tag {report['tag']})")
    print(f"top-1 accuracy   {acc:.4f}")
    print(f"sparsity         {report['counted_sparsity']:.6f} (exact zeros, prunable layers)")
    print(f"resource ({rm.kind}) {report['resource']:.6f}")
    print(f"{'layer':>5} {'kind':>6} {'prunable':>8} {'connections':>11} {'zeros':>9} {'connectivity':>12}")
    for r in report["layers"]:
        print(f"{r['layer']:>5} {r['kind']:>6} {str(r['prunable']):>8} {r['connections']:>11} "
              f"{r['zeros']:>9} {r['connectivity']:>12.6f}")
    return report


def cmd_export_metrics(run_dir: Path, fmt: str, dest: str | None) -> list:
    rows = read_metrics(run_dir / "metrics.csv")
    if fmt == "json":
        text = json.dumps(rows, indent=1)
    else:
        text = (run_dir / "metrics.csv").read_text()
    if dest:
        Path(dest).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return rows


def _overrides(extra: list) -> list:
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(tok, "expected --key=value")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            try:
                val = next(it)
            except StopIteration:
                raise ConfigError(key, "missing value") from None
        pairs.append((key, val))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snnprune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "compress", "eval"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs/default", help="output directory")
        if name == "compress":
            sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
        if name == "eval":
            sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("export-metrics")
    sp.add_argument("--run", "--out", dest="out", default="runs/default", help="run directory")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--dest", help="write here instead of stdout")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args, extra = build_parser().parse_known_args(argv)
    try:
        if args.command == "export-metrics":
            if extra:
                raise ConfigError(extra[0], "export-metrics takes no overrides")
            cmd_export_metrics(Path(args.out), args.format, args.dest)
            return EXIT_OK
        pairs = _overrides(extra)
        if args.seed is not None:
            pairs.append(("seed", str(args.seed)))
        if args.command == "eval":
            ck = load_checkpoint(args.checkpoint)
            cfg = load_config(args.config, pairs) if args.config else checkpoint_config(ck, pairs)
            cmd_eval(Path(args.checkpoint), cfg)
            return EXIT_OK
        out = Path(args.out)
        resume = args.command == "compress" and args.resume
        if resume and not args.config and (out / "last.ckpt").exists():
            cfg = checkpoint_config(load_checkpoint(out / "last.ckpt"), pairs)
        else:
            cfg = load_config(args.config, pairs)
        if args.command == "train":
            cmd_train(cfg, out)
        else:
            cmd_compress(cfg, out, resume=resume)
        return EXIT_OK
    except (ConfigError, DimensionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, CheckpointError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
