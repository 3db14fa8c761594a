"""Gradient descent-ascent compression loop.

One iteration updates, in order:

1. weights: base optimizer step, then the closed-form proximal decay of the
   bottom-ceil(s) entries by ``1 / (1 + 2 eta1 y)``;
2. sparsity level: ``s -= eta2 * (y * d||W||^2_{s,2}/ds + z * dR/ds)`` with
   straight-through derivatives, clamped to ``[0, N]``;
3. sparsity dual: ``y += eta3 * ||W||^2_{ceil(s),2}``;
4. resource dual: ``z = max(0, z + eta4 * (R(s) - R_budget))``.

A budget list drives the run: whenever R(s) drops to the next budget the
bottom weights are snapped to exact zero, frozen, and the network is
fine-tuned before pruning resumes towards the following budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .metrics import MetricsWriter
from .optim import cosine_lr, make_optimizer
from .resource import (
    ResourceModel,
    build_resource_model,
    counted_sparsity,
    measured_resource,
    resource_value,
    resource_value_layers,
    ste_resource_grad,
    ste_resource_grad_layer,
)
from .snn import LOSSES, SpikingNetwork, accuracy, forward_unroll, one_hot, stbp_backward
from .sparsity import (
    DomainError,
    bottom_indices,
    bottom_s2_sq,
    flatten,
    prox_factors,
    scale_groups,
    ste_sparsity_grad,
    structured_flatview,
    unflatten,
)

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Loss, gradients or dual variables became non-finite."""


@dataclass
class PruningState:
    """Sparsity levels and duals.

    ``groups`` lists the layer indices each sparsity variable controls: one
    group holding every prunable layer in global mode, one group per layer in
    per-layer mode. ``z`` is shared. ``eta1 = 0`` means "use the base
    optimizer's learning rate".
    """

    groups: list
    s: list
    y: list
    z: float = 0.0
    eta1: float = 0.0
    eta2: float = 1.0
    eta3: float = 0.1
    eta4: float = 1e5
    per_layer: bool = False
    structured: bool = False

    @classmethod
    def for_network(cls, net: SpikingNetwork, per_layer: bool = False, structured: bool = False,
                    **etas) -> "PruningState":
        prunable = [i for i, l in enumerate(net.layers) if l.prunable]
        groups = [[i] for i in prunable] if per_layer else [prunable]
        return cls(groups, [0.0] * len(groups), [0.0] * len(groups),
                   per_layer=per_layer, structured=structured, **etas)

    @property
    def s_total(self) -> float:
        return float(sum(self.s))

    @property
    def y_total(self) -> float:
        return float(sum(self.y))

    def view(self, net: SpikingNetwork, g: int):
        builder = structured_flatview if self.structured else flatten
        return builder(net.layers, self.groups[g])

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("groups", "s", "y", "z", "eta1", "eta2", "eta3", "eta4", "per_layer", "structured")}


class StepInfo(NamedTuple):
    loss: float
    correct: int
    resource: float


def _check_finite(what: str, *arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {what}")


def _loss_and_grads(net, batch, loss_fn):
    x, target = batch
    rates, cache = forward_unroll(net, x)
    loss, d_rates = loss_fn(rates, target)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    grads = stbp_backward(net, cache, d_rates)
    flat = []
    for (dw, db), layer in zip(grads, net.layers):
        _check_finite("weight gradient", dw, db)
        flat.append(dw)
        if layer.bias is not None:
            flat.append(db)
    correct = int(np.sum(np.argmax(rates, axis=1) == np.argmax(target, axis=1)))
    return loss, flat, correct


def dual_ascent_y(y: float, eta3: float, bottom_sq: float) -> float:
    return y + eta3 * bottom_sq


def dual_ascent_z(z: float, eta4: float, gap: float) -> float:
    """Projected ascent on the resource multiplier; ``gap = R(s) - R_budget``."""
    return max(0.0, z + eta4 * gap)


def _apply_factors(net, view, factors, structured: bool):
    if structured:
        scale_groups(view, net.layers, factors)
    else:
        view.values = np.where(factors == 1.0, view.values, view.values * factors)
        unflatten(view, net.layers)


def _order(rm: ResourceModel, state: PruningState, views):
    if state.per_layer or rm.uniform:
        return None
    return bottom_indices(views[0].values, len(views[0]))


def current_resource(rm: ResourceModel, state: PruningState, s=None, order=None) -> float:
    s = state.s if s is None else s
    if state.per_layer:
        return resource_value_layers(rm, {g[0]: sv for g, sv in zip(state.groups, s)})
    if not state.groups[0]:
        return 1.0
    return resource_value(rm, s[0], order)


def _resource_grad(rm, state, g, s, order) -> float:
    if state.per_layer:
        return ste_resource_grad_layer(rm, state.groups[g][0], s)
    return ste_resource_grad(rm, s, order)


def minimax_step(net: SpikingNetwork, state: PruningState, batch, rm: ResourceModel,
                 r_budget: float, optimizer, loss_fn=LOSSES["mse"]) -> StepInfo:
    """One descent-ascent iteration over (W, s, y, z); mutates ``net`` and ``state``."""
    loss, grads, correct = _loss_and_grads(net, batch, loss_fn)
    optimizer.step(grads)
    eta1 = state.eta1 or optimizer.lr

    views = []
    for g in range(len(state.groups)):
        view = state.view(net, g)
        if state.y[g] > 0:
            f = prox_factors(view.values, state.s[g], state.y[g], eta1)
            _apply_factors(net, view, f, state.structured)
            view = state.view(net, g)
        views.append(view)
    net.touch()

    order = _order(rm, state, views)
    s_new = []
    for g, view in enumerate(views):
        n = len(view)
        if n == 0:
            s_new.append(0.0)
            continue
        d_sparsity = state.y[g] * ste_sparsity_grad(view, state.s[g])
        d_resource = state.z * _resource_grad(rm, state, g, state.s[g], order)
        s_new.append(float(np.clip(state.s[g] - state.eta2 * (d_sparsity + d_resource), 0.0, n)))
    for g, view in enumerate(views):
        state.y[g] = dual_ascent_y(state.y[g], state.eta3, bottom_s2_sq(view, s_new[g]))
    state.s = s_new
    r = current_resource(rm, state, order=order)
    state.z = dual_ascent_z(state.z, state.eta4, r - r_budget)
    if not (math.isfinite(state.z) and all(map(math.isfinite, state.y))):
        raise NumericError(f"dual variables diverged: y={state.y}, z={state.z}")
    return StepInfo(loss, correct, r)


def finetune_step(net: SpikingNetwork, batch, optimizer, masks=None, loss_fn=LOSSES["mse"]) -> StepInfo:
    """Plain optimizer step; weights outside ``masks`` keep gradient 0 and stay 0."""
    loss, grads, correct = _loss_and_grads(net, batch, loss_fn)
    if masks is not None:
        k = 0
        for i, layer in enumerate(net.layers):
            if masks[i] is not None:
                grads[k] = grads[k] * masks[i]
            k += 2 if layer.bias is not None else 1
    optimizer.step(grads)
    if masks is not None:
        for layer, m in zip(net.layers, masks):
            if m is not None:
                layer.weight *= m
    net.touch()
    return StepInfo(loss, correct, float("nan"))


def settle_at_budget(rm: ResourceModel, state: PruningState, budget: float, order=None, iters: int = 60):
    """Scale every s back by a common factor so R(s) sits on the budget.

    One ascent step can carry s well past the crossing point; snapping there
    would overshoot the target ratio. Bisection on the factor keeps the
    smallest pull-back that still satisfies R(s) <= budget.
    """
    s = list(state.s)
    if current_resource(rm, state, s, order) > budget:
        return
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if current_resource(rm, state, [mid * v for v in s], order) <= budget:
            hi = mid
        else:
            lo = mid
    state.s = [hi * v for v in s]


def snap_to_budget(net: SpikingNetwork, state: PruningState, rm: ResourceModel | None = None,
                   budget: float | None = None) -> list:
    """Zero the bottom-ceil(s) entries (or groups) of each sparsity group.

    Returns per-layer keep masks (``None`` for non-prunable layers); exact
    zeros are frozen by them during fine-tuning.
    """
    for g in range(len(state.groups)):
        view = state.view(net, g)
        k = min(len(view), math.ceil(state.s[g]))
        idx = bottom_indices(view.values, k)
        if state.structured:
            f = np.ones(len(view))
            f[idx] = 0.0
            scale_groups(view, net.layers, f)
        else:
            view.values = view.values.copy()
            view.values[idx] = 0.0
            unflatten(view, net.layers)
    net.touch()
    if rm is not None and budget is not None:
        got = measured_resource(rm, net)
        if got > budget + 1.0 / max(rm.n, 1) + 1e-12:
            log.warning("snap left resource %.6f above budget %.6f", got, budget)
    return [(l.weight != 0).astype(np.float64) if l.prunable else None for l in net.layers]


class Phase(NamedTuple):
    kind: str                 # "pruning" | "finetune" | "done"
    budget: float | None = None


@dataclass
class BudgetSchedule:
    budgets: list
    total_epochs: int
    used_epochs: int = 0
    policy: str = "weighted"
    fixed_epochs: int = 10
    lr_policy: str = "cosine"

    def __post_init__(self):
        self.budgets = [float(b) for b in self.budgets]
        if any(not 0 < b < 1 for b in self.budgets):
            raise ValueError("budget ratios must lie in (0, 1)")
        if any(a <= b for a, b in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budget ratios must be strictly decreasing")

    @property
    def head(self) -> float | None:
        return self.budgets[0] if self.budgets else None

    def complete(self):
        """Drop the budget whose fine-tuning just finished."""
        self.budgets.pop(0)

    def finetune_epochs(self) -> int:
        return finetune_epochs(0, self.budgets, self.total_epochs, self.used_epochs,
                               self.policy, self.fixed_epochs)


def schedule_advance(sched: BudgetSchedule, current_ratio: float) -> Phase:
    if not sched.budgets:
        return Phase("done")
    if current_ratio <= sched.budgets[0]:
        return Phase("finetune", sched.budgets[0])
    return Phase("pruning")


def finetune_epochs(i: int, budgets, total_epochs: int, used_epochs: int,
                    policy: str = "weighted", fixed: int = 10) -> int:
    """Fine-tune epochs for ``budgets[i]`` (0-based) among the remaining ``budgets[i:]``.

    Weighted: the share ``(1/S_i) / sum_j (1/S_j)`` of the epochs left,
    rounded half up; the last budget takes everything that remains.
    """
    if policy == "fixed":
        return int(fixed)
    remaining = list(budgets)[i:]
    if not remaining:
        raise DomainError("no budgets left to schedule")
    left = max(0, total_epochs - used_epochs)
    if len(remaining) == 1:
        return left
    share = (1.0 / remaining[0]) / sum(1.0 / b for b in remaining)
    return int(math.floor(share * left + 0.5))


def evaluate(net: SpikingNetwork, dataset) -> float:
    return accuracy(net, dataset.inputs, dataset.labels)


def _batches(rng, n: int, batch_size: int):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class CompressionRun:
    """Stateful driver for pruning and fine-tuning phases over epochs.

    Everything that influences future iterations (weights, optimizer buffers,
    duals, schedule, masks, shuffle RNG) is saved in ``last.ckpt`` after every
    epoch, so :meth:`resume` continues bit-for-bit.
    """

    def __init__(self, cfg: RunConfig, net: SpikingNetwork, train, test=None,
                 out_dir=None, echo=None):
        self.cfg = cfg
        self.net = net
        self.train = train
        self.test = test
        self.out_dir = Path(out_dir) if out_dir else None
        self.echo = echo or (lambda msg: None)
        self.loss_fn = LOSSES[cfg.loss]
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.opt = make_optimizer(cfg.optimizer, net.tensors(), cfg.lr, cfg.momentum, cfg.weight_decay)
        structured = cfg.structure == "structured"
        self.state = PruningState.for_network(
            net, per_layer=cfg.sparsity_mode == "per-layer", structured=structured,
            eta1=cfg.eta1, eta2=cfg.eta2, eta3=cfg.eta3, eta4=cfg.eta4)
        self.rm = build_resource_model(net, cfg.resource, structured)
        self.schedule = BudgetSchedule(list(cfg.budgets), cfg.total_epochs,
                                       policy=cfg.finetune_policy, fixed_epochs=cfg.finetune_epochs,
                                       lr_policy=cfg.finetune_lr_policy)
        self.targets = one_hot(train.labels, net.n_classes)
        self.epoch = 0
        self.iteration = 0
        self.phase = "prune" if self.schedule.budgets else "train"
        self.ft_budget = None
        self.ft_total = 0
        self.ft_done = 0
        self.masks = None
        self.trace = []
        self.history = []
        self.reached = {}
        self.checkpoints = {}
        self.writer = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.writer = MetricsWriter(self.out_dir / "metrics.csv")

    @property
    def iters_per_epoch(self) -> int:
        return math.ceil(len(self.train) / self.cfg.batch_size)

    def resource(self) -> float:
        order = None
        if not self.state.per_layer and not self.rm.uniform:
            order = bottom_indices(self.state.view(self.net, 0).values, self.rm.n)
        return current_resource(self.rm, self.state, order=order)

    def run(self):
        while self.epoch < self.cfg.total_epochs and self.phase != "done":
            self.run_epoch()
        if self.phase == "finetune":
            self._finish_budget()
        if self.schedule.budgets:
            log.warning("epochs exhausted before reaching budgets %s", self.schedule.budgets)
        if self.out_dir:
            self.save(self.out_dir / "final.ckpt", tag="final")
        if self.writer:
            self.writer.close()
        return self.net, self.history

    def run_epoch(self):
        cfg = self.cfg
        label = self.phase if self.phase != "finetune" else f"finetune:{self.ft_budget:g}"
        started_in_finetune = self.phase == "finetune"
        losses = []
        for b, idx in enumerate(_batches(self.rng, len(self.train), cfg.batch_size)):
            batch = (self.train.inputs[idx], self.targets[idx])
            if self.phase == "finetune":
                if self.schedule.lr_policy == "cosine":
                    step = self.ft_done * self.iters_per_epoch + b
                    self.opt.lr = cosine_lr(cfg.finetune_lr, step, self.ft_total * self.iters_per_epoch)
                info = finetune_step(self.net, batch, self.opt, None if cfg.regrow else self.masks,
                                     self.loss_fn)
                losses.append(info.loss)
                continue
            r_budget = self.schedule.head if self.phase == "prune" else 1.0
            info = minimax_step(self.net, self.state, batch, self.rm, r_budget, self.opt, self.loss_fn)
            losses.append(info.loss)
            self.iteration += 1
            self.trace.append((self.iteration, self.state.s_total, self.state.y_total,
                               self.state.z, info.resource))
            if self.phase == "prune":
                ph = schedule_advance(self.schedule, info.resource)
                if ph.kind == "finetune":
                    self._enter_finetune(ph.budget)
                    break
        self.epoch += 1
        if started_in_finetune and self.phase == "finetune":
            self.ft_done += 1
            if self.ft_done >= self.ft_total:
                self._finish_budget()
        self._log_epoch(label, float(np.mean(losses)) if losses else float("nan"))

    def _enter_finetune(self, budget: float):
        order = None
        if not self.state.per_layer and not self.rm.uniform:
            order = bottom_indices(self.state.view(self.net, 0).values, self.rm.n)
        settle_at_budget(self.rm, self.state, budget, order)
        self.masks = snap_to_budget(self.net, self.state, self.rm, budget)
        self.reached[budget] = self.iteration
        self.schedule.used_epochs = self.epoch + 1
        self.ft_budget = budget
        self.ft_total = min(self.schedule.finetune_epochs(),
                            max(0, self.cfg.total_epochs - self.epoch - 1))
        self.ft_done = 0
        self.opt.reset()
        self.opt.lr = self.cfg.finetune_lr if self.schedule.lr_policy == "cosine" else self.cfg.lr
        self.phase = "finetune"
        self.echo(f"iter {self.iteration}: resource {self.resource():.5f} <= {budget:g}, "
                  f"fine-tuning {self.ft_total} epochs")
        if self.ft_total == 0:
            self._finish_budget()

    def _finish_budget(self):
        budget = self.ft_budget
        if self.out_dir:
            path = self.out_dir / f"budget_{budget:g}.ckpt"
            self.save(path, tag=f"{budget:g}")
            self.checkpoints[budget] = str(path)
        self.schedule.complete()
        self.schedule.used_epochs = self.epoch
        self.masks = None
        self.ft_budget = None
        self.opt.lr = self.cfg.lr
        self.phase = "prune" if self.schedule.budgets else "done"

    def _log_epoch(self, label: str, loss: float):
        acc = evaluate(self.net, self.test if self.test is not None else self.train)
        row = {
            "epoch": self.epoch,
            "phase": label,
            "loss": loss,
            "acc": acc,
            "s": self.state.s_total,
            "y": self.state.y_total,
            "z": self.state.z,
            "resource": self.resource(),
            "counted_sparsity": counted_sparsity(self.net, self.cfg.snap_eps),
        }
        self.history.append(row)
        self.echo(f"epoch {row['epoch']:>3} {label:<16} loss {loss:.5f} acc {acc:.4f} "
                  f"s {row['s']:.1f} R {row['resource']:.4f} sparsity {row['counted_sparsity']:.4f}")
        if self.writer:
            self.writer.append(row)
        if self.out_dir:
            self.save(self.out_dir / "last.ckpt", tag="last", acc=acc)

    # persistence

    def to_checkpoint(self, tag: str, acc: float | None = None) -> Checkpoint:
        tensors = {f"param{i}": t for i, t in enumerate(self.net.tensors())}
        opt_meta, opt_arrays = self.opt.state()
        tensors.update({f"opt{i}": a for i, a in enumerate(opt_arrays)})
        if self.masks is not None:
            tensors.update({f"mask{i}": m for i, m in enumerate(self.masks) if m is not None})
        if acc is None:
            acc = evaluate(self.net, self.test if self.test is not None else self.train)
        meta = {
            "tag": tag,
            "acc": acc,
            "config": self.cfg.items(),
            "state": self.state.as_dict(),
            "schedule": {"budgets": self.schedule.budgets, "used_epochs": self.schedule.used_epochs},
            "epoch": self.epoch,
            "iteration": self.iteration,
            "phase": self.phase,
            "ft": [self.ft_budget, self.ft_total, self.ft_done],
            "optimizer": opt_meta,
            "rng": self.rng.bit_generator.state,
            "reached": {repr(k): v for k, v in self.reached.items()},
            "resource": self.resource(),
            "counted_sparsity": counted_sparsity(self.net, 0.0),
        }
        return Checkpoint(self.net.describe(), tensors, meta)

    def save(self, path, tag: str, acc: float | None = None):
        save_checkpoint(path, self.to_checkpoint(tag, acc))

    @classmethod
    def resume(cls, path, cfg: RunConfig, train, test=None, out_dir=None, echo=None) -> "CompressionRun":
        ck = load_checkpoint(path)
        net = network_from_checkpoint(ck)
        run = cls(cfg, net, train, test, out_dir, echo)
        meta = ck.meta
        n_opt = sum(1 for k in ck.tensors if k.startswith("opt"))
        run.opt.load(meta["optimizer"], [ck.tensors[f"opt{i}"] for i in range(n_opt)])
        st = meta["state"]
        run.state.s, run.state.y, run.state.z = list(st["s"]), list(st["y"]), st["z"]
        run.schedule.budgets = list(meta["schedule"]["budgets"])
        run.schedule.used_epochs = meta["schedule"]["used_epochs"]
        run.epoch, run.iteration, run.phase = meta["epoch"], meta["iteration"], meta["phase"]
        run.ft_budget, run.ft_total, run.ft_done = meta["ft"]
        run.rng.bit_generator.state = meta["rng"]
        run.reached = {float(k): v for k, v in meta["reached"].items()}
        if any(k.startswith("mask") for k in ck.tensors):
            run.masks = [ck.tensors.get(f"mask{i}") for i in range(len(net.layers))]
        return run


def network_from_checkpoint(ck: Checkpoint) -> SpikingNetwork:
    n = sum(1 for k in ck.tensors if k.startswith("param"))
    return SpikingNetwork.from_description(ck.arch, [ck.tensors[f"param{i}"].copy() for i in range(n)])


def train_baseline(cfg: RunConfig, net: SpikingNetwork, train, test=None, out_dir=None, echo=None):
    """Plain surrogate-gradient training without any pruning machinery."""
    echo = echo or (lambda msg: None)
    loss_fn = LOSSES[cfg.loss]
    rng = np.random.default_rng([cfg.seed, 7])
    opt = make_optimizer(cfg.optimizer, net.tensors(), cfg.lr, cfg.momentum, cfg.weight_decay)
    targets = one_hot(train.labels, net.n_classes)
    writer = MetricsWriter(Path(out_dir) / "metrics.csv") if out_dir else None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(rng, len(train), cfg.batch_size):
            info = finetune_step(net, (train.inputs[idx], targets[idx]), opt, None, loss_fn)
            losses.append(info.loss)
        acc = evaluate(net, test if test is not None else train)
        row = {"epoch": epoch, "phase": "train", "loss": float(np.mean(losses)), "acc": acc,
               "s": 0.0, "y": 0.0, "z": 0.0, "resource": 1.0,
               "counted_sparsity": counted_sparsity(net, cfg.snap_eps)}
        history.append(row)
        echo(f"epoch {epoch:>3} train loss {row['loss']:.5f} acc {acc:.4f}")
        if writer:
            writer.append(row)
    if writer:
        writer.close()
    if out_dir:
        ck = Checkpoint(net.describe(), {f"param{i}": t for i, t in enumerate(net.tensors())},
                        {"tag": "baseline", "acc": history[-1]["acc"] if history else evaluate(net, test if test is not None else train),
                         "config": cfg.items(), "epoch": cfg.epochs,
                         "counted_sparsity": counted_sparsity(net, 0.0)})
        save_checkpoint(Path(out_dir) / "baseline.ckpt", ck)
    return net, history


def run_compression(cfg: RunConfig, net: SpikingNetwork, train, test=None, out_dir=None, echo=None):
    """Compress ``net`` through every budget in ``cfg.budgets``; returns ``(net, history, run)``."""
    run = CompressionRun(cfg, net, train, test, out_dir, echo)
    run.run()
    return run.net, run.history, run
