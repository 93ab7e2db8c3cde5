"""Minimal dense tensor with reverse-mode automatic differentiation.

Only the operator set the lifting network needs is provided. Every operator
returns a new :class:`Tensor`; when any input requires a gradient and
recording is enabled, the output remembers its parents and a closure that maps
the output adjoint to input adjoints. :func:`backward` replays those closures
in reverse topological order via a :class:`GradTape`.
"""
import contextlib
import threading

import numpy as np

from . import _kernels
from .errors import NonFiniteError, ShapeError, TapeError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negative(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), negative(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negative(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return multiply(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _all_finite(data):
    if data.size < 1024 or not data.flags.c_contiguous:
        return bool(np.isfinite(data).all())
    flat = data.reshape(-1)
    # one BLAS dot propagates any NaN/Inf; overflow of the dot itself is
    # resolved by the exact elementwise test
    return bool(np.isfinite(np.dot(flat, flat))) or bool(np.isfinite(data).all())


def _result(data, parents, backward_fn, op):
    """Wrap an operator output, recording it when a parent needs a gradient."""
    if not _all_finite(data):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class GradTape:
    """Operations reachable from an output, in execution (topological) order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, output):
        order, seen = [], set()
        stack = [(output, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    @property
    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def replay(self, output, seed):
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward on an output with an empty tape")
    tape = GradTape.record(loss)
    if not tape.leaves:
        raise TapeError("backward on an output with an empty tape")
    tape.replay(loss, np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# arithmetic and shape operators
# ---------------------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform") from exc
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)
    return _result(out, (a, b), bw, "add")


def multiply(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,), "scale")
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not conform") from exc
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)
    return _result(out, (a, b), bw, "multiply")


def negative(a):
    return _result(-a.data, (a,), lambda g: (-g,), "negative")


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a, eps=0.0):
    """``sqrt(a + eps)``; ``eps`` keeps the derivative finite at zero."""
    out = np.sqrt(a.data + eps)
    return _result(out, (a,), lambda g: (0.5 * g / np.maximum(out, 1e-30),), "sqrt")


def tsum(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return multiply(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)
    return _result(a.data[idx], (a,), bw, "getitem")


def _is_advanced(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: non-conforming shapes "
                         + ", ".join(str(t.shape) for t in tensors)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def matmul(a, b):
    """Contraction over the last axis of ``a`` and the second-to-last of ``b``.

    Leading axes broadcast numpy-style; gradients are summed back over
    broadcast axes.
    """
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)
    return _result(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.2):
    ad = a.data
    pos = ad >= 0
    out = np.where(pos, ad, slope * ad)
    return _result(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to entries where ``mask`` != 0.

    Entries outside the mask are exactly zero in the output.
    """
    m = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask) != 0,
                        logits.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: a mask row has no nonzero entry")
    z = np.where(m, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _result(s, (logits,), bw, "masked_softmax")


def softmax(logits):
    return masked_softmax(logits, np.ones(logits.shape[-1], dtype=bool))


class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def _channel_sum(a):
    """Sum of a (B, C, ...) array over every axis except channels."""
    B, C = a.shape[:2]
    a3 = np.ascontiguousarray(a).reshape(B, C, -1)
    return (a3 @ np.ones(a3.shape[2], dtype=a.dtype)).sum(axis=0)


def batchnorm2d(x, bn, training):
    """Normalise (B, C, T, N) per channel over batch, time and joint axes."""
    if x.ndim != 4 or x.shape[1] != bn.gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} vs {bn.gamma.shape[0]} channels")
    xd = x.data
    gamma, beta = bn.gamma.data, bn.beta.data
    m = xd.size // xd.shape[1]
    if training:
        mu = _channel_sum(xd) / m
        xc = xd - mu[None, :, None, None]
        var = _channel_sum(xc * xc) / m
        if grad_enabled():
            unbiased = var * m / max(m - 1, 1)
            bn.running_mean *= 1 - bn.momentum
            bn.running_mean += bn.momentum * mu
            bn.running_var *= 1 - bn.momentum
            bn.running_var += bn.momentum * unbiased
    else:
        xc = xd - bn.running_mean[None, :, None, None]
        var = bn.running_var
    inv = (1.0 / np.sqrt(var + bn.eps)).astype(xd.dtype)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def bw(g):
        dgamma = _channel_sum(g * xhat)
        dbeta = _channel_sum(g)
        if training:
            coef = (gamma * inv)[None, :, None, None]
            dx = g - (dbeta / m)[None, :, None, None] - xhat * (dgamma / m)[None, :, None, None]
            dx *= coef
        else:
            dx = g * (gamma * inv)[None, :, None, None]
        return dx, dgamma, dbeta
    return _result(out, (x, bn.gamma, bn.beta), bw, "batchnorm2d")


def dropout(x, p, training, rng=None):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, dilation_t=1, stride_t=1):
    """Valid convolution of (B, C_in, T, N) with a (C_out, C_in, k_t, k_n) kernel.

    Time is dilated/strided; the joint kernel width must be 1 (pointwise) or N
    (collapses the joint axis).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    B, Ci, T, N = x.shape
    Co, Ci2, kt, kn = weight.shape
    if Ci != Ci2:
        raise ShapeError(f"conv2d: input has {Ci} channels, weight expects {Ci2}")
    if kt < 1 or kn not in (1, N):
        raise ShapeError(f"conv2d: kernel {kt}x{kn} unsupported for {N} joints")
    if dilation_t < 1 or stride_t < 1:
        raise ValueError("conv2d: dilation and stride must be >= 1")
    extent = (kt - 1) * dilation_t + 1
    if T < extent:
        raise ShapeError(f"conv2d: input length {T} shorter than kernel extent {extent}")
    To = (T - extent) // stride_t + 1
    No = N - kn + 1
    xd, wd = x.data, weight.data
    w2 = wd.reshape(Co, Ci * kt * kn)
    offsets = [(a * dilation_t, j) for a in range(kt) for j in range(kn)]
    tspan = stride_t * (To - 1) + 1

    if kt == 1 and kn == 1 and stride_t == 1:
        cols = xd.reshape(B, Ci, T * N)
    else:
        cols = np.stack([xd[:, :, s:s + tspan:stride_t, j:j + No] for s, j in offsets], axis=2)
        cols = cols.reshape(B, Ci * kt * kn, To * No)
    out = np.matmul(w2, cols).reshape(B, Co, To, No)
    parents = (x, weight)
    if bias is not None:
        out += bias.data[None, :, None, None]
        parents = parents + (bias,)

    def bw(g):
        g2 = g.reshape(B, Co, To * No)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        dcols = np.matmul(w2.T, g2)
        if kt == 1 and kn == 1 and stride_t == 1:
            gx = dcols.reshape(xd.shape)
        else:
            dcols = dcols.reshape(B, Ci, kt * kn, To, No)
            gx = np.zeros_like(xd)
            for idx, (s, j) in enumerate(offsets):
                gx[:, :, s:s + tspan:stride_t, j:j + No] += dcols[:, :, idx]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads
    return _result(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# graph kernels (numba or numpy, see _kernels)
# ---------------------------------------------------------------------------

def pair_attention(a, b, slope=0.2):
    """Attention rows ``softmax_j(leaky_relu(a_i + b_j))``.

    ``a`` and ``b`` have shape (..., N); the result has shape (..., N, N).
    """
    if a.shape != b.shape:
        raise ShapeError(f"pair_attention: {a.shape} vs {b.shape}")
    lead, N = a.shape[:-1], a.shape[-1]
    a2 = a.data.reshape(-1, N)
    b2 = b.data.reshape(-1, N)
    out = _kernels.pair_softmax_fwd(a2, b2, slope)

    def bw(g):
        ga, gb = _kernels.pair_softmax_bwd(out, a2, b2, g.reshape(out.shape), slope)
        return ga.reshape(a.shape), gb.reshape(b.shape)
    return _result(out.reshape(lead + (N, N)), (a, b), bw, "pair_attention")


def graph_mix(adj, h):
    """Per-channel adjacency mixing: ``y[b,c,t,i] = sum_j adj[c,i,j] h[b,c,t,j]``."""
    if adj.ndim != 3 or h.ndim != 4 or adj.shape[0] != h.shape[1] or adj.shape[1:] != (h.shape[3],) * 2:
        raise ShapeError(f"graph_mix: adjacency {adj.shape} vs features {h.shape}")
    A, hd = adj.data, h.data
    out = _kernels.graph_mix_fwd(A, hd)

    def bw(g):
        return _kernels.graph_mix_bwd(A, hd, g)
    return _result(out, (adj, h), bw, "graph_mix")
