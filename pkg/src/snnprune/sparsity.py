"""Bottom-(s,2) norm, its straight-through derivative in s, and the proximal step.

``s`` is a continuous sparsity level. Norms and thresholds use ``ceil(s)``
elements; the STE derivative uses index ``min(dim, floor(s) + 1)``.
Magnitude ties are broken by flat index (stable sort) wherever an explicit
bottom set is materialised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of a sparsity operator."""


@dataclass
class Segment:
    layer: int
    start: int
    stop: int
    shape: tuple
    group_size: int = 1


@dataclass
class FlatView:
    """Concatenated prunable values with a map back to their owning layer.

    In the unstructured view each value is one weight. In the structured view
    each value is the L2 norm of one weight group (``group_size`` weights).
    """

    values: np.ndarray
    segments: list
    structured: bool = False

    def __len__(self) -> int:
        return int(self.values.size)

    def owner(self, i: int):
        """(layer index, offset inside that layer) for flat position ``i``."""
        for seg in self.segments:
            if seg.start <= i < seg.stop:
                return seg.layer, i - seg.start
        raise IndexError(i)

    def layer_of(self) -> np.ndarray:
        out = np.empty(len(self), dtype=np.int64)
        for seg in self.segments:
            out[seg.start:seg.stop] = seg.layer
        return out

    def costs(self) -> np.ndarray:
        """Weights per flat value (1 in the unstructured view)."""
        out = np.empty(len(self))
        for seg in self.segments:
            out[seg.start:seg.stop] = seg.group_size
        return out


def _groups(weight: np.ndarray, kind: str) -> np.ndarray:
    # linear (out, in): one group per input column; conv: one group per filter
    if kind == "linear":
        return weight.T
    return weight.reshape(weight.shape[0], -1)


def flatten(layers, which=None) -> FlatView:
    """Unstructured view over prunable layers (or the layer indices in ``which``)."""
    idx = [i for i, l in enumerate(layers) if l.prunable] if which is None else list(which)
    parts, segments, start = [], [], 0
    for i in idx:
        w = layers[i].weight
        parts.append(w.ravel())
        segments.append(Segment(i, start, start + w.size, w.shape))
        start += w.size
    values = np.concatenate(parts) if parts else np.zeros(0)
    return FlatView(values, segments)


def structured_flatview(layers, which=None) -> FlatView:
    """Group view: column L2 norms for linear layers, filter norms for conv."""
    idx = [i for i, l in enumerate(layers) if l.prunable] if which is None else list(which)
    parts, segments, start = [], [], 0
    for i in idx:
        g = _groups(layers[i].weight, layers[i].kind)
        norms = np.sqrt(np.sum(g * g, axis=1))
        parts.append(norms)
        segments.append(Segment(i, start, start + norms.size, layers[i].weight.shape, g.shape[1]))
        start += norms.size
    values = np.concatenate(parts) if parts else np.zeros(0)
    return FlatView(values, segments, structured=True)


def unflatten(view: FlatView, layers):
    """Write unstructured ``view.values`` back into the owning weight tensors."""
    for seg in view.segments:
        layers[seg.layer].weight[...] = view.values[seg.start:seg.stop].reshape(seg.shape)


def scale_groups(view: FlatView, layers, factors: np.ndarray):
    """Multiply every weight of each structured group by its factor."""
    for seg in view.segments:
        layer = layers[seg.layer]
        f = factors[seg.start:seg.stop]
        if layer.kind == "linear":
            layer.weight *= f[None, :]
        else:
            layer.weight *= f[:, None, None, None]


def _as_values(v) -> np.ndarray:
    return v.values if isinstance(v, FlatView) else np.asarray(v, dtype=np.float64)


def _check_s(s: float, n: int):
    if not (0 <= s <= n) or math.isnan(s):
        raise DomainError(f"s={s} outside [0, {n}]")


def bottom_s2_sq(v, s: float) -> float:
    """Sum of squares of the ``ceil(s)`` smallest-magnitude entries."""
    x = _as_values(v)
    _check_s(s, x.size)
    k = math.ceil(s)
    if k == 0:
        return 0.0
    sq = x * x
    if k >= x.size:
        return float(np.sum(sq))
    return float(np.sum(np.partition(sq, k - 1)[:k]))


def ste_sparsity_grad(v, s: float) -> float:
    """Proxy derivative of :func:`bottom_s2_sq` in s: the ``min(dim, floor(s)+1)``-th least square."""
    x = _as_values(v)
    _check_s(s, x.size)
    if x.size == 0:
        return 0.0
    j = min(x.size, math.floor(s) + 1)
    return float(np.partition(x * x, j - 1)[j - 1])


def decay_mask(v, s: float) -> np.ndarray:
    """True where an entry's square is not strictly above the ``ceil(s)``-th least square."""
    x = _as_values(v)
    _check_s(s, x.size)
    k = math.ceil(s)
    if k == 0:
        return np.zeros(x.size, dtype=bool)
    sq = x * x
    thr = np.partition(sq, k - 1)[k - 1]
    return ~(sq > thr)


def prox_factors(v, s: float, y: float, eta1: float) -> np.ndarray:
    """Per-entry multipliers of the closed-form proximal step (1 or ``1/(1+2 eta1 y)``)."""
    if y < 0:
        raise DomainError(f"dual variable y must be >= 0, got {y}")
    if eta1 <= 0:
        raise DomainError(f"step size eta1 must be > 0, got {eta1}")
    x = _as_values(v)
    out = np.ones(x.size)
    if y == 0:
        return out
    out[decay_mask(x, s)] = 1.0 / (1.0 + 2.0 * eta1 * y)
    return out


def prox_sparsity(w_bar, s: float, y: float, eta1: float):
    """Proximal map of ``eta1 * y * bottom_s2_sq(., s)`` evaluated at ``w_bar``.

    Entries whose square exceeds the ``ceil(s)``-th least square are returned
    untouched; the rest shrink by ``1/(1 + 2 eta1 y)``. Nothing is zeroed.
    Returns the same type it was given.
    """
    x = _as_values(w_bar)
    f = prox_factors(x, s, y, eta1)
    out = np.where(f == 1.0, x, x * f)
    if isinstance(w_bar, FlatView):
        return FlatView(out, w_bar.segments, w_bar.structured)
    return out


def count_zeros(v, snap_eps: float = 1e-8) -> int:
    if snap_eps < 0:
        raise DomainError("snap_eps must be >= 0")
    x = _as_values(v)
    return int(np.count_nonzero(np.abs(x) <= snap_eps))


def bottom_indices(v, k: int) -> np.ndarray:
    """Flat indices of the ``k`` smallest magnitudes, ties broken by index."""
    x = _as_values(v)
    return np.argsort(np.abs(x), kind="stable")[:k]
