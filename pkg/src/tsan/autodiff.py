"""Reverse-mode automatic differentiation over 64-bit numpy arrays.

A forward pass inside a ``record()`` context appends nodes to a tape; the
tape's append order is a valid topological order, so ``backward`` is a single
reverse sweep. Tensors outside any tape (or inside ``no_grad``) behave as
plain array wrappers, which keeps inference cheap.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .exceptions import DimensionError

_active_tape: "Tape | None" = None


class Tape:
    """Append-only computation record; node order is topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def add(self, parents, backward_fn=None, leaf=None) -> int:
        self.nodes.append(_Node(parents, backward_fn, leaf))
        return len(self.nodes) - 1


class _Node:
    __slots__ = ("parents", "backward_fn", "leaf")

    def __init__(self, parents, backward_fn, leaf):
        self.parents = parents          # tuple of node ids, -1 for untracked
        self.backward_fn = backward_fn  # grad -> tuple of parent grads
        self.leaf = leaf                # Tensor, for leaf-registration nodes


class record:
    """Context manager that installs a fresh tape for gradient recording."""

    def __enter__(self) -> Tape:
        global _active_tape
        self._prev = _active_tape
        _active_tape = Tape()
        return _active_tape

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev


class no_grad:
    """Context manager that suspends recording (inference fast path)."""

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = None

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev


class Tensor:
    """N-dimensional float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "init_kind", "decay",
                 "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self.init_kind = ""
        self.decay = False
        self._tape = None
        self._node_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        return backward(self)


def parameter(data, name: str, init: str = "he", decay: bool = False) -> Tensor:
    """Trainable leaf tensor with an initialization tag for ``he_init``."""
    t = Tensor(data, requires_grad=True, name=name)
    t.init_kind = init
    t.decay = decay
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node_of(t: Tensor, tape: Tape) -> int:
    """Node id of ``t`` on ``tape``, registering requires_grad leaves lazily."""
    if t._tape is tape:
        return t._node_id
    if t.requires_grad:
        nid = tape.add((), None, leaf=t)
        t._tape = tape
        t._node_id = nid
        return nid
    return -1


def _apply(out_data: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape
    if tape is None:
        return out
    ids = tuple(_node_of(p, tape) for p in parents)
    if all(i < 0 for i in ids):
        return out
    out._tape = tape
    out._node_id = tape.add(ids, backward_fn)
    return out


def backward(loss: Tensor) -> dict:
    """Reverse-accumulate gradients of a scalar loss into its leaves.

    Returns a map from leaf Tensor to its (accumulated) gradient array.
    Leaves registered on the tape but unreachable from the loss keep their
    zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not attached to a computation record")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss._node_id] = np.ones_like(loss.data)
    touched: dict = {}
    for node in nodes:
        if node.leaf is not None:
            touched[node.leaf] = node.leaf.grad
    for nid in range(loss._node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = nodes[nid]
        if node.leaf is not None:
            node.leaf.grad += g
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pid < 0 or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        grads[nid] = None
    return touched


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _apply(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _apply(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _apply(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _apply(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                          _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _apply(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def absolute(a) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is 0."""
    a = as_tensor(a)
    return _apply(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


# ---------------------------------------------------------------------------
# reductions

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    return _apply(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean())
    inv = 1.0 / a.data.size
    return _apply(out, (a,), lambda g: (np.broadcast_to(g * inv, a.data.shape),))


def _first_extremum_grad(a: Tensor, flat_index: int):
    def bw(g):
        ga = np.zeros_like(a.data)
        ga.reshape(-1)[flat_index] = g.reshape(-1)[0]
        return (ga,)
    return bw


def min_all(a) -> Tensor:
    """Scalar minimum; gradient routes to the first minimal element in scan order."""
    a = as_tensor(a)
    idx = int(np.argmin(a.data))
    return _apply(np.asarray(a.data.reshape(-1)[idx]), (a,), _first_extremum_grad(a, idx))


def max_all(a) -> Tensor:
    """Scalar maximum; gradient routes to the first maximal element in scan order."""
    a = as_tensor(a)
    idx = int(np.argmax(a.data))
    return _apply(np.asarray(a.data.reshape(-1)[idx]), (a,), _first_extremum_grad(a, idx))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)

    return _apply(out, (a,), bw)


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat requires at least one input")
    ref = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref} vs {s} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for k in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[k], offsets[k + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _apply(out, ts, bw)


def concat_channels(tensors: Iterable) -> Tensor:
    """Channel concatenation of [N,C,...] maps sharing batch and spatial extents."""
    return concat(tensors, axis=1)


def zero_pad3d(a, pads) -> Tensor:
    """Zero-pad the last three axes; pads = ((d0,d1),(h0,h1),(w0,w1))."""
    a = as_tensor(a)
    nd = a.data.ndim
    full = [(0, 0)] * (nd - 3) + list(pads)
    out = np.pad(a.data, full)
    sl = tuple(slice(p[0], p[0] + s) for p, s in zip(full, a.data.shape))
    return _apply(out, (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _apply(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def elu(a) -> Tensor:
    """Exponential linear unit with alpha = 1."""
    a = as_tensor(a)
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    out = np.where(a.data > 0, a.data, neg_part)

    def bw(g):
        return (np.where(a.data > 0, g, g * (neg_part + 1.0)),)

    return _apply(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _apply(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _apply(out, (a,), lambda g: (g * (1.0 - out * out),))


def identity(a) -> Tensor:
    a = as_tensor(a)
    return _apply(a.data.copy(), (a,), lambda g: (g,))


_ACTIVATIONS = {"relu": relu, "elu": elu, "sigmoid": sigmoid, "identity": identity}


def activation(a, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _apply(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map [N,F] @ [F,G] + [G]."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# convolution and pooling

def _as_triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 per-axis values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def conv3d(x, kernel, bias=None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of [N,C,D,H,W] with [O,C,kd,kh,kw] kernels."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise DimensionError("conv3d expects 5-D input and kernel")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise DimensionError(
            f"conv3d: input has {x.data.shape[1]} channels, kernel expects {kernel.data.shape[1]}")
    if stride < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {stride}")
    pads = _as_triple(padding)
    kd, kh, kw = kernel.data.shape[2:]
    spatial = x.data.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(spatial, pads))
    if kd > padded[0] or kh > padded[1] or kw > padded[2]:
        raise DimensionError(
            f"conv3d: kernel {kernel.data.shape[2:]} exceeds padded input extent {padded}")
    out_sp = tuple((ps - k) // stride + 1 for ps, k in zip(padded, (kd, kh, kw)))
    N = x.data.shape[0]
    O = kernel.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in pads))
    out = np.zeros((N, O) + out_sp)
    kernels.conv3d_forward(xp, kernel.data, stride, out)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (O,):
            raise DimensionError(f"conv3d: bias shape {bias.data.shape}, expected ({O},)")
        out += bias.data[None, :, None, None, None]
        parents.append(bias)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pads, spatial))

    def bw(g):
        g = np.ascontiguousarray(g)
        gk = np.zeros_like(kernel.data)
        kernels.conv3d_backward_kernel(xp, stride, g, gk)
        gxp = np.zeros_like(xp)
        kernels.conv3d_backward_input(gxp, kernel.data, stride, g)
        grads = [gxp[crop], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _apply(out, parents, bw)


def maxpool3d(x, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum over the last three axes.

    Gradient routes to the first maximal element of each window in scan
    order (x fastest).
    """
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise DimensionError("maxpool3d expects a 5-D input")
    if window < 1:
        raise ValueError(f"maxpool3d: window must be >= 1, got {window}")
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError(f"maxpool3d: stride must be >= 1, got {stride}")
    D, H, W = x.data.shape[2:]
    if window > D or window > H or window > W:
        raise DimensionError(f"maxpool3d: window {window} exceeds spatial extents {(D, H, W)}")
    win = sliding_window_view(x.data, (window,) * 3, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    N, C, Do, Ho, Wo = win.shape[:5]
    flat = win.reshape(N, C, Do, Ho, Wo, -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        di, dj, dl = np.unravel_index(arg, (window,) * 3)
        n, c, zi, yi, xi = np.indices((N, C, Do, Ho, Wo), sparse=False)
        np.add.at(gx, (n, c, zi * stride + di, yi * stride + dj, xi * stride + dl), g)
        return (gx,)

    return _apply(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of [N,C,D,H,W] -> [N,C]."""
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise DimensionError("global_avg_pool expects a 5-D input")
    m = x.data.shape[2] * x.data.shape[3] * x.data.shape[4]
    out = x.data.mean(axis=(2, 3, 4))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None, None] / m, x.data.shape),)

    return _apply(out, (x,), bw)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of [N,C,D,H,W].

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place; eval mode normalizes with the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 5:
        raise DimensionError("batch_norm expects a 5-D input")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError("batch_norm: gamma/beta must have shape (C,)")
    axes = (0, 2, 3, 4)
    if training:
        if x.data.shape[0] < 2:
            raise ValueError("batch_norm: train mode requires batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None, None]) * inv_std[None, :, None, None, None]
    out = gamma.data[None, :, None, None, None] * xhat + beta.data[None, :, None, None, None]
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3] * x.data.shape[4]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gs = gamma.data[None, :, None, None, None] * inv_std[None, :, None, None, None]
        if training:
            gm = g.mean(axis=axes)[None, :, None, None, None]
            gxm = (g * xhat).mean(axis=axes)[None, :, None, None, None]
            gx = gs * (g - gm - xhat * gxm)
        else:
            gx = gs * g
        return (gx, ggamma, gbeta)

    return _apply(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# recurrence

class LSTMParams:
    """Parameters of one LSTM direction; gate order is (input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden_size: int, name: str):
        H = hidden_size
        self.hidden_size = H
        self.w_x = parameter(np.zeros((input_size, 4 * H)), f"{name}.w_x", init="he", decay=True)
        self.w_h = parameter(np.zeros((H, 4 * H)), f"{name}.w_h", init="he", decay=True)
        self.bias = parameter(np.zeros(4 * H), f"{name}.bias", init="zero", decay=False)

    def tensors(self):
        yield self.w_x
        yield self.w_h
        yield self.bias


def _lstm_direction(x: Tensor, p: LSTMParams, reverse: bool) -> list:
    T, N, _ = x.data.shape
    H = p.hidden_size
    h = Tensor(np.zeros((N, H)))
    c = Tensor(np.zeros((N, H)))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outs: list = [None] * T
    for t in steps:
        xt = reshape(narrow(x, 0, t, 1), (N, x.data.shape[2]))
        z = add(add(matmul(xt, p.w_x), matmul(h, p.w_h)), p.bias)
        i = sigmoid(narrow(z, 1, 0, H))
        f = sigmoid(narrow(z, 1, H, H))
        g = tanh(narrow(z, 1, 2 * H, H))
        o = sigmoid(narrow(z, 1, 3 * H, H))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        outs[t] = reshape(h, (1, N, H))
    return outs


def lstm_sequence(x, forward_params: LSTMParams,
                  backward_params: LSTMParams | None = None) -> Tensor:
    """Standard LSTM over [T,N,F] -> [T,N,H] ([T,N,2H] when bidirectional)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError("lstm_sequence expects a [T,N,F] input")
    if x.data.shape[0] < 1:
        raise ValueError("lstm_sequence requires T >= 1")
    fwd = concat(_lstm_direction(x, forward_params, reverse=False), axis=0)
    if backward_params is None:
        return fwd
    bwd = concat(_lstm_direction(x, backward_params, reverse=True), axis=0)
    return concat([fwd, bwd], axis=2)


# ---------------------------------------------------------------------------
# numerical gradient oracle

def finite_difference_gradient(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``f`` receives the Tensor and must return a scalar Tensor or float.
    Used as the independent oracle for every analytic gradient.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = f(x)
            fp = fp.item() if isinstance(fp, Tensor) else float(fp)
            flat[idx] = orig - eps
            fm = f(x)
            fm = fm.item() if isinstance(fm, Tensor) else float(fm)
            flat[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.data.shape)
