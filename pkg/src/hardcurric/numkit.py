"""Float64 tensor kernel with reverse-mode differentiation, Adam and a gradient checker.

The differentiable op set is deliberately closed:

    matmul, add, scale, concat, reshape, mean, relu, gelu, softmax,
    dropout, mse, cross_entropy, transpose

Everything else in the package is composed from these. All ops accept
leading batch dimensions and broadcast the way numpy does.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError, DomainError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Rng:
    """Seeded, splittable PCG64 generator.

    ``child(name)`` derives an independent stream from ``(seed, name)`` so
    that unrelated consumers never shift each other's draws.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self._path = tuple(path)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self._path])))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, *self._path, zlib.crc32(name.encode()))

    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size)

    def uniform(self, size=None):
        return self.gen.random(size)

    def integers(self, high, size=None):
        return self.gen.integers(0, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)
    a_vec = a.ndim == 1

    def backward(g):
        A = a.data[None, :] if a_vec else a.data
        G = g[..., None, :] if a_vec else g
        ga = np.matmul(G, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        if a_vec:
            ga = ga[..., 0, :]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def scale(x, c) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array); ``c`` is not differentiated."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=np.float64)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"scale: constant of shape {c.shape} changes tensor shape {x.shape}")
    return _node(out, (x,), lambda g: (g * c,))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def mean(x, axis: int = -2) -> Tensor:
    """Arithmetic mean along ``axis``; with the default it is token mean-pooling."""
    x = as_tensor(x)
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _node(out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _node(out, (x,), backward)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    p = _softmax_np(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), backward)


def dropout(x, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training``."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an Rng")
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def mse(x, x_hat) -> Tensor:
    """Mean of squared elementwise differences over all entries."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse: shapes {x.shape} and {x_hat.shape} differ")
    diff = x_hat.data - x.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def backward(g):
        gd = (2.0 / n) * g * diff
        return -gd, gd

    return _node(out, (x, x_hat), backward)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Negative log-softmax at ``labels``, computed in log space.

    ``logits`` is ``(C,)`` with an int label, or ``(B, C)`` with ``B`` labels.
    ``reduction="none"`` keeps one value per row.
    """
    logits = as_tensor(logits)
    z = logits.data
    lab = np.asarray(labels, dtype=np.int64)
    C = z.shape[-1]
    if lab.shape != z.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels shape {lab.shape} vs logits {z.shape}")
    if np.any(lab < 0) or np.any(lab >= C):
        raise DomainError(f"cross_entropy: label out of range [0, {C})")
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z, lab[..., None], axis=-1)[..., 0]
    per = lse - picked
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
    p = _softmax_np(z)
    if reduction == "none":
        return _node(per, (logits,), lambda g: (g[..., None] * (p - onehot),))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    n = per.size

    def backward(g):
        return (g * (p - onehot) / n,)

    return _node(np.asarray(per.sum() / n), (logits,), backward)


# ----------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Each node is visited once in reverse topological order. Leaves that do
    not influence the loss get zero gradients. A graph can be walked once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; run the forward pass again")
    loss._consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if node._parents:
                del grads[id(node)]
            node._backward = None
    return {name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
            for name, t in wrt.items()}


def leaves(params: Mapping[str, np.ndarray], trainable=None) -> dict[str, Tensor]:
    """Wrap parameter arrays as graph leaves; names outside ``trainable`` stay constant."""
    return {k: Tensor(v, requires_grad=trainable is None or k in trainable) for k, v in params.items()}


# ---------------------------------------------------------- grad check


def grad_check(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               eps: float = 1e-5, n_coords: int = 50, rng: Rng | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a dict of leaves to a scalar loss and must be
    deterministic. ``n_coords`` coordinates are sampled across all params
    (all of them when fewer exist).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    lv = leaves(params)
    loss = loss_fn(lv)
    if loss_fn(leaves(params)).item() != loss.item():
        raise ContractError("grad_check: loss function is not deterministic")
    analytic = backward(loss, lv)

    coords = [(k, i) for k in params for i in range(params[k].size)]
    rng = rng or Rng(0)
    if len(coords) > n_coords:
        pick = rng.gen.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    def f(k, i, delta):
        p = {kk: vv for kk, vv in params.items()}
        p[k] = params[k].copy()
        p[k].reshape(-1)[i] += delta
        return loss_fn({kk: Tensor(vv) for kk, vv in p.items()}).item()

    worst = 0.0
    for k, i in coords:
        num = (f(k, i, eps) - f(k, i, -eps)) / (2.0 * eps)
        ana = float(analytic[k].reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update over the names in ``grads``.

    Returns a new parameter dict; names without a gradient pass through.
    """
    b1, b2 = state.betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    out = dict(params)
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad for {k} has shape {g.shape}, param {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: state for {k} has shape {m.shape}, param {p.shape}")
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out
