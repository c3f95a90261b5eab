"""Small dense kernels: LSTM and linear layers with exact backward passes,
Adam, global-norm clipping and a finite-difference gradient checker.

Arrays are float64 numpy arrays.  Sequence inputs are batched as
(N, T, features); a bare (T, features) sequence is treated as N = 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


def sigmoid(z):
    # tanh form: overflow-free and cheaper than a sign-split exp
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def sigmoid_grad(z):
    s = sigmoid(z)
    return s * (1.0 - s)


def tanh(z):
    return np.tanh(z)


def tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


# --- LSTM ----------------------------------------------------------------------


@dataclass
class LstmParams:
    """Gate blocks packed in order input, forget, cell, output."""

    W: np.ndarray  # (4H, d_in)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        H4, d_in = self.W.shape
        if H4 % 4 or self.U.shape != (H4, H4 // 4) or self.b.shape != (H4,):
            raise ValueError(f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}")

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator) -> "LstmParams":
        k = 1.0 / np.sqrt(d_h)
        W = rng.uniform(-k, k, (4 * d_h, d_in))
        U = rng.uniform(-k, k, (4 * d_h, d_h))
        b = rng.uniform(-k, k, 4 * d_h)
        b[d_h : 2 * d_h] = 1.0
        return cls(W, U, b)

    @classmethod
    def zeros(cls, d_in: int, d_h: int) -> "LstmParams":
        return cls(np.zeros((4 * d_h, d_in)), np.zeros((4 * d_h, d_h)), np.zeros(4 * d_h))


@dataclass
class LstmCache:
    # per-step tensors are stored time-major: (T, N, .)
    p: LstmParams
    x: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    gates: np.ndarray  # activated i, f, g, o: (T, N, 4H)
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray
    squeeze: bool


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (T, d) or (N, T, d) input, got shape {x.shape}")
    return x, False


def lstm_forward(p: LstmParams, x, h0=None, c0=None):
    """Run the recurrence over ``x``; returns (hidden states, cache)."""
    x, squeeze = _batched(x)
    N, T, d = x.shape
    H = p.hidden_size
    if d != p.input_size:
        raise ValueError(f"LSTM expects {p.input_size} input features, got {d}")
    h = np.zeros((N, H)) if h0 is None else np.broadcast_to(np.asarray(h0, dtype=np.float64), (N, H)).copy()
    c = np.zeros((N, H)) if c0 is None else np.broadcast_to(np.asarray(c0, dtype=np.float64), (N, H)).copy()
    h_init, c_init = h.copy(), c.copy()

    xt = np.ascontiguousarray(x.transpose(1, 0, 2))
    gates = xt @ p.W.T + p.b  # pre-activations, overwritten in place below
    UT = p.U.T
    cs = np.empty((T, N, H))
    tcs = np.empty((T, N, H))
    hs = np.empty((T, N, H))
    for t in range(T):
        a = gates[t]
        a += h @ UT
        # sigmoid(z) = (1 + tanh(z/2)) / 2 on i, f, o; tanh on g
        a[:, 2 * H : 3 * H] *= 2.0
        np.tanh(a * 0.5, out=a)
        a[:, : 2 * H] += 1.0
        a[:, : 2 * H] *= 0.5
        a[:, 3 * H :] += 1.0
        a[:, 3 * H :] *= 0.5
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        cs[t] = c
        np.tanh(c, out=tcs[t])
        np.multiply(a[:, 3 * H :], tcs[t], out=hs[t])
        h = hs[t]
    cache = LstmCache(p, xt, h_init, c_init, gates, cs, tcs, hs, squeeze)
    out = hs.transpose(1, 0, 2)
    return (out[0] if squeeze else out), cache


def lstm_backward(cache: LstmCache, grad_h, grad_c_last=None):
    """Backpropagation through time.

    Returns ``(grads, dx, dh0, dc0)`` where ``grads`` is an ``LstmParams``
    holding dW, dU, db.
    """
    grad_h, _ = _batched(grad_h)
    xt, gates, cs, tcs, hs = cache.x, cache.gates, cache.c, cache.tanh_c, cache.h
    T, N, H = hs.shape
    if grad_h.shape != (N, T, H):
        raise ValueError(f"grad_h shape {grad_h.shape} does not match hidden states {(N, T, H)}")
    gh = np.ascontiguousarray(grad_h.transpose(1, 0, 2))
    U = cache.p.U
    dz = np.empty((T, N, 4 * H))
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H)) if grad_c_last is None else np.asarray(grad_c_last, dtype=np.float64).reshape(N, H)
    for t in range(T - 1, -1, -1):
        a = gates[t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = tcs[t]
        c_prev = cs[t - 1] if t > 0 else cache.c0
        dh = gh[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[:, :H] = dc * g * i * (1.0 - i)
        d[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ U
    h_prev = np.concatenate([cache.h0[None], hs[:-1]], axis=0)
    dz2 = dz.reshape(T * N, 4 * H)
    grads = LstmParams(
        dz2.T @ xt.reshape(T * N, -1),
        dz2.T @ h_prev.reshape(T * N, H),
        dz2.sum(axis=0),
    )
    dx = (dz @ cache.p.W).transpose(1, 0, 2)
    if cache.squeeze:
        return grads, dx[0], dh_next[0], dc_next[0]
    return grads, dx, dh_next, dc_next


# --- linear --------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    def __post_init__(self):
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "LinearParams":
        k = 1.0 / np.sqrt(d_in)
        return cls(rng.uniform(-k, k, (d_out, d_in)), rng.uniform(-k, k, d_out))


def linear_forward(p: LinearParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.weight.shape[1]:
        raise ValueError(f"linear layer expects {p.weight.shape[1]} inputs, got {x.shape[-1]}")
    return x @ p.weight.T + p.bias


def linear_backward(p: LinearParams, x, grad_out):
    """Returns (LinearParams of gradients, grad wrt x)."""
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[:-1] != x.shape[:-1] or grad_out.shape[-1] != p.weight.shape[0]:
        raise ValueError(f"grad shape {grad_out.shape} does not match output of input {x.shape}")
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    grads = LinearParams(g2.T @ x.reshape(-1, x.shape[-1]), g2.sum(axis=0))
    return grads, grad_out @ p.weight


# --- optimisation ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update; inputs are not modified.

    Returns ``(new_params, new_state)``.
    """
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ValueError(f"gradient {name!r} does not match any parameter tensor")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    new = state.copy()
    new.step += 1
    bc1 = 1.0 - new.beta1 ** new.step
    bc2 = 1.0 - new.beta2 ** new.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p.copy()
            continue
        m = new.m.get(name, np.zeros_like(p))
        v = new.v.get(name, np.zeros_like(p))
        m = new.beta1 * m + (1.0 - new.beta1) * g
        v = new.beta2 * v + (1.0 - new.beta2) * g * g
        new.m[name], new.v[name] = m, v
        out[name] = p - new.lr * (m / bc1) / (np.sqrt(v / bc2) + new.eps)
    return out, new


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float = 5.0) -> Tuple[Params, float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    k = max_norm / norm
    return {name: g * k for name, g in grads.items()}, norm


# --- gradient checking ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: Optional[Tuple[str, Tuple[int, ...]]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """|a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
    turning float roundoff into huge ratios."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences of ``f``.

    ``f`` takes no arguments and reads ``params`` (perturbed in place and
    restored).  With ``max_coords`` set, that many coordinates are sampled
    uniformly across all tensors.
    """
    coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst, worst_err = None, 0.0
    for name, idx in coords:
        p = params[name]
        orig = p[idx]
        p[idx] = orig + step
        up = f()
        p[idx] = orig - step
        down = f()
        p[idx] = orig
        numeric = (up - down) / (2.0 * step)
        err = relative_error(float(grads[name][idx]), numeric)
        if err >= worst_err:
            worst, worst_err = (name, idx), err
    return GradCheckReport(worst_err, len(coords), worst, tolerance)
