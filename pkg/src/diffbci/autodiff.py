"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations the diffusion network needs are provided.  Every op
records a closure mapping the upstream gradient to gradients for its
parents; :meth:`Tensor.backward` walks the graph once in reverse
topological order and then marks it consumed.

Convolutions and the batch layout are ``(N, C, L)``; 2-D ``(C, L)`` input
is accepted and returned as 2-D.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar backward, double backward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed; rebuild it before calling backward() again")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            # release intermediates; the graph cannot be replayed
            node._backward = None
            node._parents = ()
        self._consumed = True


_grad_mode = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph (evaluation mode)."""
    prev = getattr(_grad_mode, "enabled", True)
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(data)
    if getattr(_grad_mode, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select entries along axis 0."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), back, "take_rows")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every sample ``factor`` times along the last axis."""
    shape = x.shape

    def back(g):
        return (g.reshape(*shape, factor).sum(axis=-1),)

    return _result(np.repeat(x.data, factor, axis=-1), (x,), back, "upsample")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis)), (x,), back, "mean")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    diff = pred.data - target
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.data.ndim != 3:
        raise ValueError(f"conv1d: expected (N, Cin, L) input and (Cout, Cin, K) kernel, got {x.shape} and {w.shape}")
    n, cin, length = xd.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ValueError(f"conv1d: input has {cin} channels, kernel expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv1d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    l_out = (length + 2 * padding - k) // stride + 1
    if l_out < 1:
        raise ValueError(f"conv1d: output length {l_out} < 1")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    out = kernels.conv1d_forward(xp, w.data, stride, l_out)
    if b is not None:
        out += b.data[None, :, None]
    lp = xp.shape[2]

    def back(g):
        g3 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gxp = kernels.conv1d_grad_input(g3, w.data, stride, lp)
            gx = gxp[:, :, padding: padding + length] if padding else gxp
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = kernels.conv1d_grad_weight(xp, g3, k, stride)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out[0] if squeeze else out, parents, back, "conv1d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    n, c, length = xd.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, length)
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]
    m = xg.shape[2]

    def back(g):
        g3 = g[None] if squeeze else g
        ggamma = (g3 * xhat).sum(axis=(0, 2))
        gbeta = g3.sum(axis=(0, 2))
        gxhat = (g3 * gamma.data[None, :, None]).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                    - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        gx = gx.reshape(n, c, length)
        return (gx[0] if squeeze else gx, ggamma, gbeta)

    return _result(out[0] if squeeze else out, (x, gamma, beta), back, "group_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return (gx, gw)
        return (gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, back, "linear")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _result(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean negative log-likelihood.

    ``logits`` is (K,) with an int ``label`` or (B, K) with B labels.
    """
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    k = z.shape[1]
    if labels.shape != (z.shape[0],):
        raise ValueError(f"cross_entropy: {labels.size} labels for {z.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= g / z.shape[0]
        return (d[0] if single else d,)

    return _result(np.asarray(loss), (logits,), back, "cross_entropy")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("adam_step: params, grads and moments differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ValueError(f"adam_step: shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient at parameter {i}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
