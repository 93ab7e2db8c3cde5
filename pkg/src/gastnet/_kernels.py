"""Hot inner loops of the graph layers.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with identical semantics. ``GAST_NUMBA=0`` in the environment forces the numpy
path; otherwise numba is used whenever it imports.

Kernels
-------
pair_softmax_fwd / pair_softmax_bwd
    ``out[m, i, j] = softmax_j(leaky_relu(a[m, i] + b[m, j]))``, the
    additive attention logits of a graph attention head.
graph_mix_fwd / graph_mix_bwd
    ``y[b, c, t, i] = sum_j A[c, i, j] * h[b, c, t, j]``, one adjacency per
    channel applied along the joint axis (numpy only, see below).
"""
import os

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_wants_numba():
    flag = os.environ.get("GAST_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _env_wants_numba()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------
#
# With z_ij = a_i + b_j, leaky_relu(z_ij) - max_j leaky_relu(z_ij) splits into a
# per-i and a per-j term on each side of zero, so every exponential factors into
# node-level exponentials: N exps per row instead of N**2.

def _pair_factors(a, b, slope):
    bmax = b.max(axis=1, keepdims=True)
    top = a + bmax  # argument of the row maximum
    mx = np.where(top >= 0, top, slope * top)
    pos_j = np.exp(b - bmax)  # exp(b_j - bmax), used where z >= 0
    neg_j = np.exp(slope * (b - bmax))  # exp(slope (b_j - bmax)), used where z < 0
    neg_i = np.exp(slope * top - mx)
    return pos_j, neg_j, neg_i


def pair_softmax_fwd_numpy(a, b, slope):
    pos_j, neg_j, neg_i = _pair_factors(a, b, slope)
    nonneg = (a[:, :, None] + b[:, None, :]) >= 0
    e = neg_i[:, :, None] * neg_j[:, None, :]
    np.copyto(e, np.broadcast_to(pos_j[:, None, :], e.shape), where=nonneg)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def pair_softmax_bwd_numpy(out, a, b, gout, slope):
    ge = gout - (gout * out).sum(axis=-1, keepdims=True)
    ge *= out
    neg = (a[:, :, None] + b[:, None, :]) < 0
    np.multiply(ge, slope, out=ge, where=neg)
    return ge.sum(axis=2), ge.sum(axis=1)


def graph_mix_fwd_numpy(A, h):
    B, C, T, N = h.shape
    # one (B*T, N) @ (N, N) product per channel
    hc = np.ascontiguousarray(h.transpose(1, 0, 2, 3)).reshape(C, B * T, N)
    y = np.matmul(hc, A.transpose(0, 2, 1))
    return y.reshape(C, B, T, N).transpose(1, 0, 2, 3).copy()


def graph_mix_bwd_numpy(A, h, gy):
    B, C, T, N = h.shape
    hc = np.ascontiguousarray(h.transpose(1, 0, 2, 3)).reshape(C, B * T, N)
    gc = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(C, B * T, N)
    gA = np.matmul(gc.transpose(0, 2, 1), hc)
    gh = np.matmul(gc, A).reshape(C, B, T, N).transpose(1, 0, 2, 3).copy()
    return gA, gh


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True, fastmath=True)
    def _pair_assemble_nb(a, b, pos_j, neg_j, neg_i):
        M, N = a.shape
        out = np.empty((M, N, N), dtype=a.dtype)
        for m in range(M):
            for i in range(N):
                s = a.dtype.type(0)
                ai = a[m, i]
                ni = neg_i[m, i]
                for j in range(N):
                    v = pos_j[m, j] if ai + b[m, j] >= 0 else ni * neg_j[m, j]
                    out[m, i, j] = v
                    s += v
                inv = 1 / s
                for j in range(N):
                    out[m, i, j] *= inv
        return out

    @numba.njit(cache=True, fastmath=True)
    def _pair_softmax_bwd_nb(out, a, b, gout, slope):
        M, N = a.shape
        ga = np.zeros((M, N), dtype=a.dtype)
        gb = np.zeros((M, N), dtype=a.dtype)
        for m in range(M):
            for i in range(N):
                dot = a.dtype.type(0)
                for j in range(N):
                    dot += gout[m, i, j] * out[m, i, j]
                acc = a.dtype.type(0)
                ai = a[m, i]
                for j in range(N):
                    g = out[m, i, j] * (gout[m, i, j] - dot)
                    if ai + b[m, j] < 0:
                        g = slope * g
                    acc += g
                    gb[m, j] += g
                ga[m, i] = acc
        return ga, gb

    def pair_softmax_fwd_numba(a, b, slope):
        a = np.ascontiguousarray(a)
        b = np.ascontiguousarray(b)
        pos_j, neg_j, neg_i = _pair_factors(a, b, a.dtype.type(slope))
        return _pair_assemble_nb(a, b, pos_j, neg_j, neg_i)

    def pair_softmax_bwd_numba(out, a, b, gout, slope):
        return _pair_softmax_bwd_nb(np.ascontiguousarray(out), np.ascontiguousarray(a),
                                    np.ascontiguousarray(b), np.ascontiguousarray(gout),
                                    a.dtype.type(slope))


def backend():
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"


def pair_softmax_fwd(a, b, slope):
    if USE_NUMBA:
        return pair_softmax_fwd_numba(a, b, slope)
    return pair_softmax_fwd_numpy(a, b, slope)


def pair_softmax_bwd(out, a, b, gout, slope):
    if USE_NUMBA:
        return pair_softmax_bwd_numba(out, a, b, gout, slope)
    return pair_softmax_bwd_numpy(out, a, b, gout, slope)


# A per-channel batched GEMM beats a numba loop for N = 17 joints, so graph
# mixing takes the numpy route under either backend.
graph_mix_fwd = graph_mix_fwd_numpy
graph_mix_bwd = graph_mix_bwd_numpy
