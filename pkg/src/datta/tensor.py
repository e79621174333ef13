"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the handful of ops the tiny classifier needs are provided: valid
cross-correlation, ReLU, global average pooling, an affine head, the two
batch-norm flavours (frozen statistics and training-mode), and the two
losses (softmax entropy and cross entropy).

Ops record themselves on the innermost active :class:`Graph` when at least
one input requires a gradient. Outside a graph nothing is recorded, which is
the cheap inference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_GRAPHS: list["Graph"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable array value; optionally a node on a recording graph."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        return total(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Graph:
    """Tape of executed ops plus a registry of named leaf parameters.

    Use as a context manager; ops executed inside are appended to ``nodes`` in
    execution order, which is also a valid topological order.
    """

    nodes: list[Tensor] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def param(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=trainable, name=name)
        self.params[name] = t
        return t

    def __enter__(self) -> "Graph":
        _GRAPHS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPHS.remove(self)


def _record(out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    t = Tensor(out)
    if _GRAPHS and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
        _GRAPHS[-1].nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def total(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # relu'(0) = 0
    return _record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                   lambda g: (g * mask,))


# ------------------------------------------------------------------ layers

def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is (N, Cin, H, W), ``kernel`` is (Cout, Cin, kh, kw).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin or kh > h or kw > w:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = _windows(x.data, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gx = np.zeros_like(x.data)
            he = stride * (ho - 1) + 1
            we = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + he:stride, j:j + we:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gk

    return _record(np.ascontiguousarray(out), (x, kernel), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    return _record(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.data.dtype),))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise ``x @ weight + bias``; x is (N, D), weight (D, K), bias (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0] \
            or bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return (g @ weight.data.T if x.requires_grad else None,
                x.data.T @ g if weight.requires_grad else None,
                g.sum(axis=0))

    return _record(out, (x, weight, bias), backward)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    if v.ndim == 1:
        return v.reshape((1, -1) + (1,) * (ndim - 2))
    return v.reshape(v.shape + (1,) * (ndim - 2))


def batch_norm(x: Tensor, mean: np.ndarray, var: np.ndarray, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` with constant statistics.

    ``mean``/``var`` are plain arrays shaped (C,) or per-sample (N, C); they
    receive no gradient.
    """
    dt = x.data.dtype
    inv = (1.0 / np.sqrt(np.asarray(var, np.float64) + eps)).astype(dt)
    xhat = (x.data - _bcast(np.asarray(mean, dt), x.data.ndim)) * _bcast(inv, x.data.ndim)
    g_ = _bcast(gamma.data, x.data.ndim)
    out = g_ * xhat + _bcast(beta.data, x.data.ndim)
    red = (0,) + tuple(range(2, x.data.ndim))

    def backward(g):
        return (g * g_ * _bcast(inv, x.data.ndim) if x.requires_grad else None,
                (g * xhat).sum(axis=red) if gamma.requires_grad else None,
                g.sum(axis=red) if beta.requires_grad else None)

    return _record(out, (x, gamma, beta), backward)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
                     ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training-mode batch norm; gradients flow through the batch statistics.

    Returns the output plus the (biased) batch mean and variance so the
    caller can maintain running estimates.
    """
    red = (0, 2, 3)
    m = x.data.size // x.shape[1]
    mean = x.data.astype(np.float64).mean(axis=red)
    var = x.data.astype(np.float64).var(axis=red)
    dt = x.data.dtype
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - _bcast(mean.astype(dt), 4)) * _bcast(inv, 4)
    out = _bcast(gamma.data, 4) * xhat + _bcast(beta.data, 4)

    def backward(g):
        gxhat = g * _bcast(gamma.data, 4)
        gx = None
        if x.requires_grad:
            gx = _bcast(inv / m, 4) * (m * gxhat - gxhat.sum(axis=red, keepdims=True)
                                       - xhat * (gxhat * xhat).sum(axis=red, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(out, (x, gamma, beta), backward), mean, var


# ------------------------------------------------------------------- losses

def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_entropy(logits: Tensor) -> Tensor:
    """Batch-mean Shannon entropy of the row-wise softmax (nats)."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_entropy expects (N, K>=2) logits, got {logits.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data.astype(np.float64))
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)

    def backward(g):
        # dH_n/dz = -p * (log p + H_n)
        return ((-(p * (logp + ent[:, None])) * (float(g) / n)).astype(logits.data.dtype),)

    return _record(np.asarray(ent.mean(), dtype=logits.data.dtype), (logits,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n = logits.shape[0]
    logp = _log_softmax(logits.data.astype(np.float64))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return ((d * (float(g) / n)).astype(logits.data.dtype),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


# ----------------------------------------------------------------- backward

def backward(graph: Graph, loss: Tensor) -> dict[str, Tensor]:
    """Reverse sweep over ``graph``; returns gradients of trainable parameters."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = {}
    for name, p in graph.params.items():
        if p.requires_grad:
            g = grads.get(id(p))
            out[name] = Tensor(np.zeros_like(p.data) if g is None else g.astype(p.data.dtype).reshape(p.shape))
    return out


def sgd_update(params: dict[str, Tensor], grads: dict[str, Tensor], lr: float) -> dict[str, Tensor]:
    """Plain SGD: returns new tensors ``p - lr * g`` for every named parameter."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    out = {}
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        out[name] = Tensor(p.data - p.data.dtype.type(lr) * grads[name].data,
                           requires_grad=p.requires_grad, name=name)
    return out
