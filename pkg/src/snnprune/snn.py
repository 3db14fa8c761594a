"""LIF spiking layers, time-unrolled forward pass and STBP backward pass.

Discrete LIF dynamics per neuron and timestep::

    H_t = V_{t-1} + (-(V_{t-1} - V_rest) + X_t) / tau_m
    S_t = heaviside(H_t - V_th)
    V_t = S_t * V_rest + (1 - S_t) * H_t

Static inputs are fed as a constant current at every timestep and the
network output is the firing rate of the last layer averaged over time.
The backward pass replaces dS/dH with the derivative of the shifted ArcTan
``h(u) = arctan(pi u) / pi + 1/2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, as_tensor, col2im, conv2d_batch, conv_output_size, im2col

PRUNE_MIN_CONNECTIONS = 10_000


class CacheError(RuntimeError):
    """Backward was called with caches that do not belong to the network state."""


@dataclass(frozen=True)
class LifParams:
    tau_m: float = 2.0
    v_rest: float = 0.0
    v_th: float = 1.0

    def __post_init__(self):
        if not self.tau_m > 0:
            raise ValueError(f"tau_m must be positive, got {self.tau_m}")
        if not self.v_th > self.v_rest:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_rest ({self.v_rest})")


@dataclass
class LifState:
    """Membrane potential plus the per-timestep history kept for backward."""

    v: np.ndarray
    h: list = field(default_factory=list)
    s: list = field(default_factory=list)

    @classmethod
    def rest(cls, shape, p: LifParams) -> "LifState":
        return cls(v=np.full(shape, p.v_rest, dtype=np.float64))

    @property
    def steps(self) -> int:
        return len(self.s)


def heaviside(x):
    """1 where ``x >= 0``, else 0 (elementwise for arrays)."""
    if np.ndim(x) == 0:
        return 1 if x >= 0 else 0
    return (np.asarray(x) >= 0).astype(np.float64)


def smooth_step(u):
    return np.arctan(np.pi * u) / np.pi + 0.5


def surrogate_derivative(u):
    """Derivative of the shifted ArcTan, ``1 / (1 + pi^2 u^2)``."""
    return 1.0 / (1.0 + (np.pi * u) ** 2)


def lif_step(state: LifState, x_t, p: LifParams, relaxed: bool = False):
    """Advance one timestep; returns ``(spikes, state)`` with caches appended.

    With ``relaxed=True`` the Heaviside is replaced by the smooth step and the
    reset blends ``V_rest`` and ``H`` with that soft spike.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != state.v.shape:
        raise DimensionError(f"input shape {x_t.shape} does not match state {state.v.shape}")
    h = state.v + (-(state.v - p.v_rest) + x_t) / p.tau_m
    u = h - p.v_th
    s = smooth_step(u) if relaxed else heaviside(u)
    v = s * p.v_rest + (1.0 - s) * h
    state.h.append(h)
    state.s.append(s)
    state.v = v
    return s, state


@dataclass
class Layer:
    """An affine (``linear``) or convolutional (``conv``) synapse feeding LIF neurons.

    ``in_shape`` excludes the batch axis. Linear weights are ``(out, in)``;
    conv weights are ``(C_out, C_in, k, k)``.
    """

    kind: str
    weight: np.ndarray
    bias: np.ndarray | None
    in_shape: tuple
    lif: LifParams = field(default_factory=LifParams)
    stride: int = 1
    padding: int = 0
    prunable: bool = True

    @property
    def out_shape(self) -> tuple:
        if self.kind == "linear":
            return (self.weight.shape[0],)
        c_out, _, k, _ = self.weight.shape
        _, h, w = self.in_shape
        return (c_out, conv_output_size(h, k, self.stride, self.padding),
                conv_output_size(w, k, self.stride, self.padding))

    @property
    def connections(self) -> int:
        return int(self.weight.size)

    @property
    def macs_per_weight(self) -> int:
        """Multiply-accumulates each weight takes part in for one sample and timestep."""
        if self.kind == "linear":
            return 1
        _, h, w = self.out_shape
        return h * w

    def current(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            out = x.reshape(x.shape[0], -1) @ self.weight.T
            if self.bias is not None:
                out += self.bias
            return out
        out = conv2d_batch(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out += self.bias[None, :, None, None]
        return out


@dataclass
class SpikingNetwork:
    layers: list
    timesteps: int = 8
    detach_reset: bool = True
    version: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        for a, b in zip(self.layers, self.layers[1:]):
            if int(np.prod(a.out_shape)) != int(np.prod(b.in_shape)):
                raise DimensionError(f"layer output {a.out_shape} does not feed input {b.in_shape}")

    @property
    def in_shape(self) -> tuple:
        return self.layers[0].in_shape

    @property
    def n_classes(self) -> int:
        return int(np.prod(self.layers[-1].out_shape))

    def weights(self) -> list:
        return [layer.weight for layer in self.layers]

    def touch(self):
        """Mark weights as modified so older forward caches are rejected."""
        self.version += 1

    def describe(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "detach_reset": self.detach_reset,
            "layers": [
                {
                    "kind": l.kind,
                    "weight_shape": list(l.weight.shape),
                    "bias": l.bias is not None,
                    "in_shape": list(l.in_shape),
                    "stride": l.stride,
                    "padding": l.padding,
                    "prunable": l.prunable,
                    "tau_m": l.lif.tau_m,
                    "v_rest": l.lif.v_rest,
                    "v_th": l.lif.v_th,
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_description(cls, desc: dict, tensors: list) -> "SpikingNetwork":
        layers = []
        it = iter(tensors)
        for d in desc["layers"]:
            w = next(it)
            b = next(it) if d["bias"] else None
            layers.append(Layer(
                kind=d["kind"], weight=w, bias=b, in_shape=tuple(d["in_shape"]),
                lif=LifParams(d["tau_m"], d["v_rest"], d["v_th"]),
                stride=d["stride"], padding=d["padding"], prunable=d["prunable"],
            ))
        return cls(layers, timesteps=desc["timesteps"], detach_reset=desc["detach_reset"])

    def tensors(self) -> list:
        out = []
        for l in self.layers:
            out.append(l.weight)
            if l.bias is not None:
                out.append(l.bias)
        return out

    def copy(self) -> "SpikingNetwork":
        return SpikingNetwork.from_description(self.describe(), [t.copy() for t in self.tensors()])


def parse_architecture(spec: str) -> list:
    """Turn an architecture string into layer descriptors.

    ``fc:784-400-10`` is a stack of fully connected layers. Convolutional
    stacks are written ``conv:1x28x28-16c3s1p1-32c3s2p1-fc128-fc10`` where
    ``<C>c<k>s<stride>p<pad>`` is a conv layer. ``conv6fc2`` is a preset for
    3x32x32 inputs.
    """
    if spec == "conv6fc2":
        spec = "conv:3x32x32-64c3s1p1-64c3s2p1-128c3s1p1-128c3s2p1-256c3s1p1-256c3s2p1-fc256-fc10"
    kind, _, body = spec.partition(":")
    if kind == "fc":
        sizes = [int(t) for t in body.split("-")]
        if len(sizes) < 2:
            raise ValueError(f"fc architecture needs at least two sizes: {spec!r}")
        return [("linear", (sizes[i],), sizes[i + 1], None) for i in range(len(sizes) - 1)]
    if kind == "conv":
        tokens = body.split("-")
        shape = tuple(int(t) for t in tokens[0].split("x"))
        if len(shape) != 3:
            raise ValueError(f"conv input shape must be CxHxW: {tokens[0]!r}")
        out = []
        for tok in tokens[1:]:
            if tok.startswith("fc"):
                n = int(tok[2:])
                out.append(("linear", shape, n, None))
                shape = (n,)
                continue
            c, rest = tok.split("c")
            k, rest = rest.split("s")
            s, p = rest.split("p")
            c, k, s, p = int(c), int(k), int(s), int(p)
            out.append(("conv", shape, c, (k, s, p)))
            shape = (c, conv_output_size(shape[1], k, s, p), conv_output_size(shape[2], k, s, p))
        return out
    raise ValueError(f"unknown architecture {spec!r}")


def build_network(spec: str, rng: np.random.Generator, timesteps: int = 8,
                  lif: LifParams | None = None, bias: bool = True,
                  init_gain: float = 1.0, prune_min_connections: int = PRUNE_MIN_CONNECTIONS,
                  detach_reset: bool = True) -> SpikingNetwork:
    """Randomly initialise a network (He-uniform scaled by ``init_gain``)."""
    lif = lif or LifParams()
    layers = []
    for kind, in_shape, n_out, conv in parse_architecture(spec):
        if kind == "linear":
            fan_in = int(np.prod(in_shape))
            shape = (n_out, fan_in)
            stride, padding = 1, 0
        else:
            k, stride, padding = conv
            shape = (n_out, in_shape[0], k, k)
            fan_in = in_shape[0] * k * k
        bound = init_gain * math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        b = np.zeros(n_out) if bias else None
        layer = Layer(kind, w, b, tuple(in_shape), lif, stride, padding)
        layer.prunable = layer.connections > prune_min_connections
        layers.append(layer)
    return SpikingNetwork(layers, timesteps=timesteps, detach_reset=detach_reset)


@dataclass
class LayerCache:
    inputs: list          # presynaptic activity per timestep (aliased when static)
    state: LifState


@dataclass
class ForwardCache:
    layers: list
    relaxed: bool
    version: int
    batch: int


def _unroll(net: SpikingNetwork, x, relaxed: bool):
    x = as_tensor(x)
    want = tuple(net.in_shape)
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != int(np.prod(want)):
        raise DimensionError(f"input {x.shape} does not match first layer {want}")
    x = x.reshape((x.shape[0],) + want)
    batch = x.shape[0]
    T = net.timesteps
    caches = []
    # the first layer sees the same current at every step
    acts = [x] * T
    static = True
    for layer in net.layers:
        xs = [a.reshape((batch,) + tuple(layer.in_shape)) for a in acts]
        if static:
            cur = layer.current(xs[0])
            currents = [cur] * T
        else:
            stacked = np.concatenate(xs, axis=0)
            cur = layer.current(stacked)
            currents = np.split(cur, T, axis=0)
        state = LifState.rest(cur.shape if static else currents[0].shape, layer.lif)
        out = []
        for t in range(T):
            s, state = lif_step(state, currents[t], layer.lif, relaxed=relaxed)
            out.append(s)
        caches.append(LayerCache(inputs=xs, state=state))
        acts = out
        static = False
    rates = np.mean([a.reshape(batch, -1) for a in acts], axis=0)
    return rates, ForwardCache(caches, relaxed, net.version, batch)


def forward_unroll(net: SpikingNetwork, x):
    """Run ``net.timesteps`` steps on a static batch; returns ``(rates, caches)``."""
    return _unroll(net, x, relaxed=False)


def relaxed_forward(net: SpikingNetwork, x, return_cache: bool = False):
    """Differentiable twin of :func:`forward_unroll` using the smooth step."""
    rates, cache = _unroll(net, x, relaxed=True)
    return (rates, cache) if return_cache else rates


def stbp_backward(net: SpikingNetwork, cache: ForwardCache, d_rates):
    """Backpropagate ``dL/drates`` through layers and time.

    Returns a list of ``(dW, db)`` per layer (``db`` is ``None`` without bias).
    The relaxed forward is differentiated exactly; the hard forward uses the
    surrogate derivative for dS/dH and, when ``net.detach_reset`` is set,
    treats the spike in the reset term as a constant.
    """
    if cache is None or not cache.layers:
        raise CacheError("no forward cache; run forward_unroll first")
    if cache.version != net.version or len(cache.layers) != len(net.layers):
        raise CacheError("forward cache is stale: network changed after the forward pass")
    T = net.timesteps
    batch = cache.batch
    d_rates = np.asarray(d_rates, dtype=np.float64)
    if d_rates.shape != (batch, net.n_classes):
        raise DimensionError(f"d_rates has shape {d_rates.shape}, expected {(batch, net.n_classes)}")
    full_reset = cache.relaxed or not net.detach_reset
    last = net.layers[-1]
    d_spikes = [(d_rates / T).reshape((batch,) + last.out_shape)] * T
    grads = [None] * len(net.layers)
    for n in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[n]
        lc = cache.layers[n]
        p = layer.lif
        st = lc.state
        if st.steps != T:
            raise CacheError(f"layer {n} cache holds {st.steps} steps, expected {T}")
        d_cur = [None] * T
        d_v = 0.0
        for t in range(T - 1, -1, -1):
            h = st.h[t]
            s = st.s[t]
            sg = surrogate_derivative(h - p.v_th)
            dv_dh = 1.0 - s
            if full_reset:
                dv_dh = dv_dh + (p.v_rest - h) * sg
            d_h = d_spikes[t] * sg + d_v * dv_dh
            d_cur[t] = d_h / p.tau_m
            d_v = d_h * (1.0 - 1.0 / p.tau_m)
        static = n == 0
        if layer.kind == "linear":
            if static:
                dc = np.sum(d_cur, axis=0)
                x = lc.inputs[0].reshape(batch, -1)
                dW = dc.T @ x
                db = dc.sum(axis=0) if layer.bias is not None else None
            else:
                dc = np.concatenate(d_cur, axis=0)
                x = np.concatenate([a.reshape(batch, -1) for a in lc.inputs], axis=0)
                dW = dc.T @ x
                db = dc.sum(axis=0) if layer.bias is not None else None
                dx = dc @ layer.weight
                d_spikes = [a.reshape((batch,) + tuple(layer.in_shape))
                            for a in np.split(dx, T, axis=0)]
        else:
            c_out, c_in, k, _ = layer.weight.shape
            if static:
                dc = np.sum(d_cur, axis=0)
                x = lc.inputs[0]
            else:
                dc = np.concatenate(d_cur, axis=0)
                x = np.concatenate(lc.inputs, axis=0)
            cols = im2col(x, k, layer.stride, layer.padding)
            dc_cols = dc.transpose(0, 2, 3, 1).reshape(-1, c_out)
            dW = (dc_cols.T @ cols.reshape(-1, cols.shape[-1])).reshape(layer.weight.shape)
            db = dc.sum(axis=(0, 2, 3)) if layer.bias is not None else None
            if not static:
                d_cols = (dc_cols @ layer.weight.reshape(c_out, -1)).reshape(cols.shape)
                dx = col2im(d_cols, x.shape, k, layer.stride, layer.padding)
                d_spikes = np.split(dx, T, axis=0)
        grads[n] = (dW, db)
    return grads


def loss_mse(rates, targets):
    """Mean squared error over batch and classes; returns ``(loss, dL/drates)``."""
    rates = np.asarray(rates, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if rates.shape != targets.shape:
        raise DimensionError(f"rates {rates.shape} and targets {targets.shape} differ")
    diff = rates - targets
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def loss_cross_entropy(rates, targets):
    """Softmax cross-entropy with firing rates as logits."""
    rates = np.asarray(rates, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if rates.shape != targets.shape:
        raise DimensionError(f"rates {rates.shape} and targets {targets.shape} differ")
    z = rates - rates.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = rates.shape[0]
    loss = -float(np.sum(targets * logp)) / n
    return loss, (np.exp(logp) - targets) / n


LOSSES = {"mse": loss_mse, "ce": loss_cross_entropy}


def one_hot(labels, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def predict(net: SpikingNetwork, x, batch_size: int = 1000) -> np.ndarray:
    preds = []
    for i in range(0, len(x), batch_size):
        rates, _ = forward_unroll(net, x[i:i + batch_size])
        preds.append(np.argmax(rates, axis=1))
    return np.concatenate(preds)


def accuracy(net: SpikingNetwork, x, labels, batch_size: int = 1000) -> float:
    return float(np.mean(predict(net, x, batch_size) == np.asarray(labels)))
