"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a node holding its inputs and a closure that maps
the output gradient to input gradients. ``backward`` walks the nodes in
reverse topological order and accumulates gradients into leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, DataError, NumericError, UsageError

_DEBUG = False
_GRAD_ENABLED = True


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    """Build no graph while active (evaluation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op. ``grad_fn(g)`` returns one gradient per parent."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class Graph:
    """Topologically ordered view of the operations that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = [t for t in order if not t.is_leaf]
        self.leaves = [t for t in order if t.is_leaf and t.requires_grad]


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad")
    graph = Graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in graph.leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def eltwise(a, b, mode: str = "mul") -> Tensor:
    if mode == "mul":
        return mul(a, b)
    if mode == "add":
        return add(a, b)
    raise ConfigurationError(f"unknown eltwise mode {mode!r}")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with a permutation or selection index."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        # np.add.at handles repeated indices
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(x.data, index, axis=axis), (x,), grad_fn, "take")


def _pads(padding):
    """Normalize padding to (top, bottom, left, right)."""
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        pads = (p, p, p, p)
    else:
        pads = tuple(int(p) for p in padding)
        if len(pads) == 2:
            pads = (pads[0], pads[0], pads[1], pads[1])
        if len(pads) != 4:
            raise ConfigurationError(f"padding must be an int or 2/4-tuple, got {padding!r}")
    if any(p < 0 for p in pads):
        raise ConfigurationError(f"padding must be non-negative, got {padding!r}")
    return pads


def pad2d(x: Tensor, pad) -> Tensor:
    """Zero-pad the last two axes; ``pad`` is an int or (top, bottom, left, right)."""
    t, b, l, r = _pads(pad)
    if t == b == l == r == 0:
        return x
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (h + t + b, w + l + r))
    out[..., t:t + h, l:l + w] = x.data
    return _node(out, (x,), lambda g: (g[..., t:t + h, l:l + w],), "pad2d")


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding=0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (K, C, kh, kw) filters."""
    if x.ndim != 4 or filters.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d input and filters, got {x.shape}, {filters.shape}")
    if int(stride) < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    k, fc, kh, kw = filters.shape
    if fc != c:
        raise ConfigurationError(f"conv2d: filters have {fc} channels, input has {c}")
    if bias is not None and bias.shape != (k,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({k},)")
    pads = _pads(padding)
    if kh > h + pads[0] + pads[1] or kw > w + pads[2] + pads[3]:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{w}")
    xp = pad2d(x, pads)
    hp, wp = xp.shape[2:]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    cols = kernels.im2col(xp.data, kh, kw, stride)
    wmat = filters.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    xshape = xp.shape

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (gm.T @ cols).reshape(filters.shape) if filters.requires_grad else None
        gx = kernels.col2im(gm @ wmat, xshape, kh, kw, stride) if xp.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (xp, filters, bias if bias is not None else Tensor(np.zeros(k)))
    return _node(out, parents, grad_fn, "conv2d")


def clamp01(x: Tensor) -> Tensor:
    d = x.data
    inside = (d > 0.0) & (d < 1.0)
    return _node(np.clip(d, 0.0, 1.0), (x,), lambda g: (g * inside,), "clamp01")


def normalize_rules(m: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Divide each rule map by the per-cell sum over rules (axis 1) plus ``epsilon``."""
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    d = m.data
    denom = d.sum(axis=1, keepdims=True) + epsilon
    out = d / denom

    def grad_fn(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / denom,)

    return _node(out, (m,), grad_fn, "normalize_rules")


def avg_pool2d(x: Tensor, window: int, stride: int = 1) -> Tensor:
    """Mean over window x window patches with a fixed divisor window**2."""
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ConfigurationError("avg_pool2d window and stride must be >= 1")
    if window > h or window > w:
        raise ConfigurationError(f"avg_pool2d window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    area = float(window * window)
    spans = [(slice(k, k + stride * (oh - 1) + 1, stride), slice(j, j + stride * (ow - 1) + 1, stride))
             for k in range(window) for j in range(window)]
    d = x.data
    # offsets from each window's first cell keep constant windows exact
    ref = d[:, :, spans[0][0], spans[0][1]]
    acc = np.zeros((n, c, oh, ow))
    for ys, xs in spans[1:]:
        acc += d[:, :, ys, xs] - ref
    out = ref + acc / area

    def grad_fn(g):
        gx = np.zeros(x.shape)
        ga = g / area
        for ys, xs in spans:
            gx[:, :, ys, xs] += ga
        return (gx,)

    return _node(out, (x,), grad_fn, "avg_pool2d")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    d = x.data
    pos = d >= 0.0
    out = np.where(pos, d, slope * d)
    return _node(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ConfigurationError(f"dense: cannot apply {weights.shape} weights to input {x.shape}")
    if bias.shape != (weights.shape[1],):
        raise ConfigurationError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    xd, wd = x.data, weights.data
    out = xd @ wd + bias.data
    return _node(out, (x, weights, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "dense")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def grad_fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _node(np.array(loss), (logits,), grad_fn, "softmax_cross_entropy")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
