"""Resource functions R(s) as ratios in [0, 1].

Each prunable unit (a weight, or a weight group in structured mode) carries
a parameter cost and a FLOP cost. R(s) is one minus the fraction of the
total removed when the ``s`` cheapest-in-magnitude units are gone; between
integers it interpolates linearly, so it is continuous and non-increasing.
Weights of non-prunable layers count towards the totals but are never
removed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .sparsity import DomainError, flatten, structured_flatview

log = logging.getLogger(__name__)

KINDS = ("connectivity", "parameters", "flops")


@dataclass
class ResourceModel:
    kind: str
    unit_layer: np.ndarray      # owning layer per unit, in flat-view order
    unit_params: np.ndarray
    unit_flops: np.ndarray
    total_params: float
    total_flops: float
    structured: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown resource kind {self.kind!r}; expected one of {KINDS}")

    @property
    def n(self) -> int:
        return int(self.unit_layer.size)

    def costs(self) -> tuple[np.ndarray, float]:
        if self.kind == "connectivity":
            return np.ones(self.n), float(self.n)
        if self.kind == "parameters":
            return self.unit_params, self.total_params
        return self.unit_flops, self.total_flops

    @property
    def uniform(self) -> bool:
        c, _ = self.costs()
        return c.size == 0 or bool(np.all(c == c[0]))

    def layers(self) -> list:
        return sorted(set(self.unit_layer.tolist()))

    def layer_units(self, layer: int) -> int:
        return int(np.count_nonzero(self.unit_layer == layer))


def build_resource_model(net, kind: str = "connectivity", structured: bool = False) -> ResourceModel:
    """Resource model over the prunable layers of ``net``.

    Unstructured FLOPs are not reduced by scattered zeros in dense kernels, so
    that request falls back to the parameters kind.
    """
    if kind == "flops" and not structured:
        log.warning("FLOPs resource requested for unstructured pruning; using parameters instead")
        kind = "parameters"
    view = structured_flatview(net.layers) if structured else flatten(net.layers)
    layer_of = view.layer_of()
    sizes = view.costs()
    macs = np.array([net.layers[i].macs_per_weight for i in layer_of], dtype=np.float64)
    total_params = float(sum(l.weight.size for l in net.layers))
    total_flops = float(sum(l.weight.size * l.macs_per_weight for l in net.layers))
    return ResourceModel(kind, layer_of, sizes, sizes * macs, total_params, total_flops, structured)


def _check(m: ResourceModel, s: float):
    if not (0 <= s <= m.n) or math.isnan(s):
        raise DomainError(f"s={s} outside [0, {m.n}]")


def _removed(costs: np.ndarray, s: float) -> float:
    k = math.floor(s)
    frac = s - k
    done = float(np.sum(costs[:k]))
    if frac > 0 and k < costs.size:
        done += frac * float(costs[k])
    return done


def resource_value(m: ResourceModel, s: float, assignment=None) -> float:
    """Remaining-resource ratio after removing ``s`` units.

    ``assignment`` orders the units by ascending magnitude (flat indices) and
    is only consulted when unit costs differ, i.e. structured parameters or
    FLOPs across layers of different shapes.
    """
    _check(m, s)
    if m.n == 0:
        return 1.0
    costs, total = m.costs()
    if m.kind == "connectivity":
        return 1.0 - s / m.n
    if m.uniform:
        return 1.0 - s * float(costs[0]) / total
    if assignment is None:
        raise ValueError("non-uniform unit costs need the magnitude ordering of units")
    return 1.0 - _removed(costs[np.asarray(assignment)], s) / total


def ste_resource_grad(m: ResourceModel, s: float, assignment=None) -> float:
    """Forward difference of :func:`resource_value` over one unit, clamped at N."""
    _check(m, s)
    step = min(1.0, m.n - s)
    if step <= 0:
        return 0.0
    if m.uniform:
        # R is exactly linear; avoid rounding noise of the difference quotient
        costs, total = m.costs()
        return -float(costs[0]) / total
    return (resource_value(m, s + step, assignment) - resource_value(m, s, assignment)) / step


def resource_value_layers(m: ResourceModel, s_layers: dict) -> float:
    """Remaining ratio when each prunable layer removes its own ``s_l`` units."""
    costs, total = m.costs()
    if m.n == 0:
        return 1.0
    removed = 0.0
    for layer, s in s_layers.items():
        n_l = m.layer_units(layer)
        if not (0 <= s <= n_l):
            raise DomainError(f"s={s} outside [0, {n_l}] for layer {layer}")
        removed += s * float(costs[m.unit_layer == layer][0]) if n_l else 0.0
    return 1.0 - removed / total


def ste_resource_grad_layer(m: ResourceModel, layer: int, s: float) -> float:
    """d R / d s_l in per-layer mode (exact, the per-layer cost is linear)."""
    n_l = m.layer_units(layer)
    if s >= n_l:
        return 0.0
    costs, total = m.costs()
    return -float(costs[m.unit_layer == layer][0]) / total


def measured_resource(m: ResourceModel, net, snap_eps: float = 0.0) -> float:
    """Resource ratio implied by the exact zeros currently in the weights."""
    view = structured_flatview(net.layers) if m.structured else flatten(net.layers)
    if len(view) == 0:
        return 1.0
    zero = np.abs(view.values) <= snap_eps
    costs, total = m.costs()
    return 1.0 - float(np.sum(costs[zero])) / total


def layer_table(net, snap_eps: float = 0.0) -> list:
    """Per-layer rows of (index, prunable, connections, zeros, connectivity)."""
    rows = []
    for i, l in enumerate(net.layers):
        zeros = int(np.count_nonzero(np.abs(l.weight) <= snap_eps))
        rows.append({
            "layer": i,
            "kind": l.kind,
            "prunable": l.prunable,
            "connections": l.connections,
            "zeros": zeros,
            "connectivity": 1.0 - zeros / l.connections,
        })
    return rows


def counted_sparsity(net, snap_eps: float = 0.0) -> float:
    """Fraction of prunable weights that are (near) zero."""
    view = flatten(net.layers)
    if len(view) == 0:
        return 0.0
    return float(np.count_nonzero(np.abs(view.values) <= snap_eps)) / len(view)
