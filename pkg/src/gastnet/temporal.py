"""Dilated temporal convolution blocks and receptive-field bookkeeping."""
import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .nn import Module, glorot
from .tensor import BatchNormState


def receptive_field(k, num_blocks):
    """Frames seen by one output: an input layer of width k plus blocks dilated k**b."""
    if k < 2 or num_blocks < 0:
        raise ValueError("need k >= 2 and num_blocks >= 0")
    return k ** (num_blocks + 1)


def num_blocks_for(receptive, k):
    """Inverse of :func:`receptive_field`; None when ``receptive`` is not a power of k."""
    b, rf = 0, k
    while rf < receptive:
        rf *= k
        b += 1
    return b if rf == receptive else None


def residual_slice(length, k, dilation, causal, strided):
    """Frames of the block input that line up with the block output."""
    if strided:
        offset = k - 1 if causal else k // 2
        n_out = (length - k) // k + 1
        return slice(offset, offset + k * (n_out - 1) + 1, k)
    crop = (k - 1) * dilation
    if causal:
        return slice(crop, length)
    return slice(crop // 2, length - (crop - crop // 2))


class TemporalBlock(Module):
    """conv(k x 1, dilated) -> BN -> ReLU -> conv(1x1) -> BN -> ReLU -> dropout, plus
    the temporally aligned input as residual.

    In strided mode the first convolution uses stride k and no dilation, so a
    window of k**b frames at block b shrinks by a factor k.
    """

    def __init__(self, channels, k, dilation, rng, dropout=0.05, causal=False,
                 dtype=np.float32):
        self.k, self.dilation, self.causal, self.p = k, dilation, causal, dropout
        self.conv1 = glorot(rng, (channels, channels, k, 1), channels * k, channels * k, dtype)
        self.bn1 = BatchNormState(channels, dtype)
        self.conv2 = glorot(rng, (channels, channels, 1, 1), channels, channels, dtype)
        self.bn2 = BatchNormState(channels, dtype)

    def output_length(self, length, strided=False):
        if strided:
            return (length - self.k) // self.k + 1
        return length - (self.k - 1) * self.dilation

    def __call__(self, x, strided=False, rng=None):
        T = x.shape[2]
        extent = self.k if strided else (self.k - 1) * self.dilation + 1
        if T < extent:
            raise ShapeError(f"temporal block needs >= {extent} frames, got {T}")
        if strided:
            h = tn.conv2d(x, self.conv1, stride_t=self.k)
        else:
            h = tn.conv2d(x, self.conv1, dilation_t=self.dilation)
        h = tn.relu(tn.batchnorm2d(h, self.bn1, self.training))
        h = tn.relu(tn.batchnorm2d(tn.conv2d(h, self.conv2), self.bn2, self.training))
        h = tn.dropout(h, self.p, self.training, rng)
        res = x[:, :, residual_slice(T, self.k, self.dilation, self.causal, strided)]
        return res + h
