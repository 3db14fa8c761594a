"""Run configuration: a flat ``key = value`` file plus ``--key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # model
    arch: str = "fc:784-400-10"
    timesteps: int = 8
    tau_m: float = 2.0
    v_rest: float = 0.0
    v_th: float = 1.0
    detach_reset: bool = True
    bias: bool = True
    init_gain: float = 1.0
    prune_min_connections: int = 10_000
    # data
    dataset: str = "mnist"
    data_dir: str = ""
    train_limit: int = 0
    synthetic_n: int = 2000
    synthetic_test_n: int = 500
    synthetic_classes: int = 4
    synthetic_features: int = 20
    synthetic_spread: float = 0.1
    # base training
    loss: str = "mse"
    optimizer: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 100
    epochs: int = 20
    # minimax
    eta1: float = 0.0           # 0 means "use the base optimizer's current lr"
    eta2: float = 1.0
    eta3: float = 0.1
    eta4: float = 1e5
    budgets: list = field(default_factory=lambda: [0.25, 0.1, 0.05, 0.01, 0.005])
    total_epochs: int = 60
    finetune_policy: str = "weighted"
    finetune_epochs: int = 10
    finetune_lr_policy: str = "cosine"
    finetune_lr: float = 1e-3
    sparsity_mode: str = "global"
    structure: str = "unstructured"
    resource: str = "connectivity"
    regrow: bool = False
    snap_eps: float = 1e-8
    init: str = "scratch"
    seed: int = 0

    def validate(self) -> "RunConfig":
        choices = {
            "dataset": ("mnist", "synthetic"),
            "loss": ("mse", "ce"),
            "optimizer": ("adam", "sgd"),
            "finetune_policy": ("weighted", "fixed"),
            "finetune_lr_policy": ("cosine", "constant"),
            "sparsity_mode": ("global", "per-layer"),
            "structure": ("unstructured", "structured"),
            "resource": ("connectivity", "parameters", "flops"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("timesteps", "batch_size", "synthetic_n", "synthetic_test_n",
                    "synthetic_classes", "synthetic_features"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("epochs", "total_epochs", "finetune_epochs", "train_limit", "prune_min_connections"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        for key in ("eta1", "eta2", "eta3", "eta4", "snap_eps", "synthetic_spread"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("lr", "learning rates must be > 0")
        if self.tau_m <= 0:
            raise ConfigError("tau_m", "must be > 0")
        if self.v_th <= self.v_rest:
            raise ConfigError("v_th", "must exceed v_rest")
        b = self.budgets
        if any(not 0 < x < 1 for x in b):
            raise ConfigError("budgets", "every ratio must lie in (0, 1)")
        if any(a <= c for a, c in zip(b, b[1:])):
            raise ConfigError("budgets", "ratios must be strictly decreasing")
        if not (self.init == "scratch" or self.init.startswith("pretrained:")):
            raise ConfigError("init", "must be 'scratch' or 'pretrained:<path>'")
        return self

    @property
    def pretrained_path(self) -> str | None:
        return self.init.partition(":")[2] if self.init.startswith("pretrained:") else None

    def items(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            try:
                return int(raw)
            except ValueError:
                f = float(raw)  # accept 1e4 style
                if not f.is_integer():
                    raise
                return int(f)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [float(t) for t in raw.replace("[", "").replace("]", "").split(",") if t.strip()]
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_pairs(pairs, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    defaults = RunConfig()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    updates = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in names:
            raise ConfigError(key, "unknown setting")
        updates[key] = _coerce(key, raw, getattr(defaults, key))
    return dataclasses.replace(cfg, **updates)


def read_config_file(path) -> list:
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k, v))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file first, then overrides (later wins), then validation."""
    cfg = RunConfig()
    if path:
        cfg = parse_pairs(read_config_file(path), cfg)
    cfg = parse_pairs(overrides, cfg)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.items().items():
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
