"""Fully connected coefficient network with hand-written backprop and Adam.

Inputs are batched row-wise: ``forward`` accepts a vector or a ``(batch, in)``
array.  Gradients returned by ``backward`` are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    # Add identity skips around hidden layers whose width matches the previous one.
    residual: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def n_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # weights[k] has shape (fan_out, fan_in)
    biases: list[np.ndarray]

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> MlpParams:
        flat = np.asarray(flat, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != flat.size:
            raise ValueError(f"expected {pos} values, got {flat.size}")
        return MlpParams(out[0::2], out[1::2])

    def zeros_like(self) -> MlpParams:
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def _skip(spec: MlpSpec, layer: int) -> bool:
    w = spec.widths
    return spec.residual and 0 < layer < len(w) - 2 and w[layer] == w[layer + 1]


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """He (relu) or Xavier (tanh) normal initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    w = spec.widths
    weights, biases = [], []
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        if spec.activation == "relu":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (z > 0).astype(z.dtype) if name == "relu" else 1.0 - a * a


@dataclass
class Tape:
    spec: MlpSpec
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations of hidden layers
    squeeze: bool = False


def forward(spec: MlpSpec, params: MlpParams, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != spec.input_dim:
        raise ValueError(f"expected input width {spec.input_dim}, got {h.shape[1]}")
    if len(params.weights) != len(spec.widths) - 1:
        raise ValueError("parameter list does not match network spec")
    tape = Tape(spec, squeeze=squeeze)
    n_layers = len(params.weights)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        z = h @ W.T + b
        if k == n_layers - 1:
            h = z
            break
        tape.pre.append(z)
        a = _act(spec.activation, z)
        h = h + a if _skip(spec, k) else a
    return (h[0] if squeeze else h), tape


def backward(params: MlpParams, tape: Tape, output_grad) -> MlpParams:
    """Reverse-mode gradient of ``sum(output * output_grad)``."""
    spec = tape.spec
    g = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    n_layers = len(params.weights)
    if len(tape.inputs) != n_layers or g.shape != (tape.inputs[0].shape[0], spec.output_dim):
        raise ValueError("tape does not match parameters or output gradient shape")
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for k in reversed(range(n_layers)):
        if k < n_layers - 1:
            z = tape.pre[k]
            # Activation output is recomputed; only pre-activations are stored.
            a = _act(spec.activation, z)
            g_h = g
            g = g_h * _act_grad(spec.activation, z, a)
        h_in = tape.inputs[k]
        gw[k] = g.T @ h_in
        gb[k] = g.sum(axis=0)
        g_in = g @ params.weights[k]
        if k < n_layers - 1 and _skip(spec, k):
            g_in = g_in + g_h
        g = g_in
    return MlpParams(gw, gb)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3, **kw) -> AdamState:
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(lr=lr, m=zeros, v=[z.copy() for z in zeros], **kw)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state objects."""
    p_arr, g_arr = params.arrays(), grads.arrays()
    if not state.m:
        state = AdamState.for_params(params, state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    if len(p_arr) != len(g_arr) or any(p.shape != g.shape for p, g in zip(p_arr, g_arr)):
        raise ValueError("gradient shapes do not match parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return MlpParams(new_p[0::2], new_p[1::2]), new_state
