"""Spatial layers: semantic graph convolution, multi-head global attention and
the three-stream graph attention block that fuses them.

All layers take and return features shaped (batch, channels, time, joints)
and act on every frame independently.
"""
import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .nn import Module, glorot
from .tensor import BatchNormState, Tensor

LEAKY_SLOPE = 0.2

STREAM_KERNELS = {"sym": "symmetric", "kin": "kinematic", "first": "first_order"}


class SemGConv(Module):
    """Graph convolution with a learnable softmax-normalised mask per output channel.

    Output channel ``c`` is ``softmax_row(M_c on the kernel's pattern) @ X @ w_c``.
    """

    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32):
        kernel = np.asarray(kernel)
        n = kernel.shape[0]
        if kernel.shape != (n, n) or not (kernel != 0).any(axis=1).all():
            raise ShapeError("SemGConv kernel must be square with a nonzero in every row")
        self.W = glorot(rng, (in_channels, out_channels), in_channels, out_channels, dtype)
        self.M = Tensor(np.ones((out_channels, n, n), dtype=dtype), requires_grad=True)
        self._mask = kernel != 0

    @property
    def kernel_mask(self):
        return self._mask

    def mixing(self):
        """Per-channel normalised adjacency, shape (C_out, N, N)."""
        return tn.masked_softmax(self.M, self._mask)

    def __call__(self, x):
        c_in, c_out = self.W.shape
        if x.ndim != 4 or x.shape[1] != c_in or x.shape[3] != self._mask.shape[0]:
            raise ShapeError(f"SemGConv expects (B, {c_in}, T, {self._mask.shape[0]}), got {x.shape}")
        h = tn.conv2d(x, tn.transpose(self.W).reshape(c_out, c_in, 1, 1))
        return tn.graph_mix(self.mixing(), h)


class GlobalAttention(Module):
    """Multi-head global graph layer: heads of ``(B_k + C_k) X W_k`` concatenated.

    ``B_k`` is a data-dependent attention matrix computed per frame, ``C_k`` a
    free learnable matrix starting at zero.
    """

    def __init__(self, channels, n_joints, heads, rng, use_bk=True, use_ck=True,
                 dtype=np.float32):
        if heads < 1 or channels % heads:
            raise ConfigError(f"channels ({channels}) must be divisible by heads ({heads})")
        if not (use_bk or use_ck):
            raise ConfigError("global attention needs B_k or C_k")
        d = channels // heads
        self.heads, self.use_bk, self.use_ck = heads, use_bk, use_ck
        self.theta = glorot(rng, (heads, d, channels), channels, d, dtype)
        self.phi = glorot(rng, (heads, d, channels), channels, d, dtype)
        self.w_f = glorot(rng, (heads, 2 * d), 2 * d, 0, dtype)
        self.C = Tensor(np.zeros((heads, n_joints, n_joints), dtype=dtype), requires_grad=True)
        self.W = glorot(rng, (heads, channels, d), channels, d, dtype)

    def attention(self, x):
        """Attention matrices ``B_k`` of shape (B, K, T, N, N); rows sum to 1."""
        K, d, C = self.theta.shape
        # w_f . [theta(x_i) || phi(x_j)] splits into a per-i and a per-j score
        u = tn.matmul(self.w_f[:, None, :d], self.theta).reshape(K, C, 1, 1)
        v = tn.matmul(self.w_f[:, None, d:], self.phi).reshape(K, C, 1, 1)
        return tn.pair_attention(tn.conv2d(x, u), tn.conv2d(x, v), LEAKY_SLOPE)

    def __call__(self, x, record=None):
        K, C, d = self.W.shape
        if x.ndim != 4 or x.shape[1] != C:
            raise ShapeError(f"GlobalAttention expects {C} channels, got {x.shape}")
        B, _, T, N = x.shape
        if self.use_bk:
            adj = self.attention(x)
            if record is not None:
                record.append(adj.data)
            if self.use_ck:
                adj = adj + self.C.reshape(1, K, 1, N, N)
        else:
            adj = self.C.reshape(1, K, 1, N, N)
        w = tn.transpose(self.W, (0, 2, 1)).reshape(C, C, 1, 1)
        h = tn.conv2d(x, w).reshape(B, K, d, T, N).transpose(0, 1, 3, 4, 2)
        y = tn.matmul(adj, h)  # (B, K, T, N, d)
        return y.transpose(0, 1, 4, 2, 3).reshape(B, C, T, N)


class GraphAttentionBlock(Module):
    """Parallel spatial streams, each followed by batchnorm + ReLU, concatenated
    and fused back to ``channels`` by a 1x1 convolution, plus a residual."""

    def __init__(self, channels, skeleton, heads, rng, streams=("sym", "kin", "global"),
                 kin_kernel="kinematic", use_bk=True, use_ck=True, residual=True,
                 dtype=np.float32):
        if not streams:
            raise ConfigError("graph attention block needs at least one stream")
        self.stream_names = tuple(streams)
        self.residual = residual
        self.streams = []
        for name in self.stream_names:
            if name == "global":
                layer = GlobalAttention(channels, skeleton.n_joints, heads, rng,
                                        use_bk=use_bk, use_ck=use_ck, dtype=dtype)
            elif name == "kin":
                layer = SemGConv(channels, channels, skeleton.kernel(kin_kernel), rng, dtype)
            elif name in STREAM_KERNELS:
                layer = SemGConv(channels, channels, skeleton.kernel(STREAM_KERNELS[name]), rng, dtype)
            else:
                raise ConfigError(f"unknown stream {name!r}")
            layer.bn = BatchNormState(channels, dtype)
            self.streams.append(layer)
        width = channels * len(self.streams)
        self.fuse = glorot(rng, (channels, width, 1, 1), width, channels, dtype)

    def named_parameters(self, prefix=""):
        # stream names instead of list indices: block{i}.{stream}.{tensor}
        for name, layer in zip(self.stream_names, self.streams):
            yield from layer.named_parameters(f"{prefix}{name}.")
        yield prefix + "fuse", self.fuse

    def named_buffers(self, prefix=""):
        for name, layer in zip(self.stream_names, self.streams):
            yield from layer.named_buffers(f"{prefix}{name}.")

    def __call__(self, x, record=None):
        outs = []
        for layer in self.streams:
            h = layer(x, record) if isinstance(layer, GlobalAttention) else layer(x)
            outs.append(tn.relu(tn.batchnorm2d(h, layer.bn, self.training)))
        h = outs[0] if len(outs) == 1 else tn.concat(outs, axis=1)
        y = tn.conv2d(h, self.fuse)
        return y + x if self.residual else y
