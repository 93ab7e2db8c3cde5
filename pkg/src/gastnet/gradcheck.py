"""Central finite-difference checks of every differentiable layer.

Each case builds a scalar ``sum(layer(...) * R)`` with a fixed random
projection ``R`` in float64, backpropagates once, and compares the tape
gradient of every input and parameter against ``(f(x + h) - f(x - h)) / 2h``.
Large tensors are spot-checked at a random subset of entries.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .graph import GlobalAttention, GraphAttentionBlock, SemGConv
from .metrics import mpjpe_loss
from .model import GastNet, GastNetConfig
from .skeleton import build_skeleton
from .temporal import TemporalBlock
from .tensor import BatchNormState, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
ATOL = 1e-6  # gradients smaller than this are compared absolutely


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric, atol=ATOL):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)


def check_gradients(loss_fn, tensors, rng, step=STEP, max_entries=40):
    """Largest relative error over (a sample of) the entries of ``tensors``.

    ``loss_fn`` maps nothing to a scalar Tensor and reads the current
    ``.data`` of the tensors; it must be deterministic.
    """
    for t in tensors.values():
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.requires_grad = True
        t.grad = None
    tn.backward(loss_fn())
    worst, count = 0.0, 0
    for t in tensors.values():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with tn.no_grad():
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(grad[i], num)))
            count += 1
    return worst, count


def _projected(fn, out_shape, rng):
    R = rng.normal(size=out_shape)
    return lambda: tn.tsum(fn() * Tensor(R))


def _rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# cases: each returns (loss_fn, {name: tensor})
# ---------------------------------------------------------------------------

def _case_conv_dilated(rng):
    x, w = _rand(rng, 2, 3, 11, 4), _rand(rng, 5, 3, 3, 1)
    f = lambda: tn.conv2d(x, w, dilation_t=2)
    return _projected(f, (2, 5, 7, 4), rng), {"x": x, "w": w}


def _case_conv_strided(rng):
    x, w, b = _rand(rng, 2, 3, 9, 4), _rand(rng, 5, 3, 3, 1), _rand(rng, 5)
    f = lambda: tn.conv2d(x, w, b, stride_t=3)
    return _projected(f, (2, 5, 3, 4), rng), {"x": x, "w": w, "b": b}


def _case_conv_joint_wide(rng):
    x, w = _rand(rng, 2, 3, 5, 4), _rand(rng, 2, 3, 1, 4)
    f = lambda: tn.conv2d(x, w)
    return _projected(f, (2, 2, 5, 1), rng), {"x": x, "w": w}


def _bn_case(rng, training):
    x = _rand(rng, 3, 4, 5, 6, scale=2.0)
    bn = BatchNormState(4, np.float64)
    bn.gamma.data = rng.uniform(0.5, 1.5, 4)
    bn.beta.data = rng.normal(size=4)
    bn.running_mean[:] = rng.normal(size=4)
    bn.running_var[:] = rng.uniform(0.5, 2.0, 4)
    f = lambda: tn.batchnorm2d(x, bn, training)
    return _projected(f, x.shape, rng), {"x": x, "gamma": bn.gamma, "beta": bn.beta}


def _case_batchnorm_train(rng):
    return _bn_case(rng, True)


def _case_batchnorm_eval(rng):
    return _bn_case(rng, False)


def _case_dropout_eval(rng):
    x = _rand(rng, 2, 3, 4, 5)
    f = lambda: tn.dropout(x, 0.5, training=False)
    return _projected(f, x.shape, rng), {"x": x}


def _case_dropout_train(rng):
    x = _rand(rng, 2, 3, 4, 5)
    # the mask is redrawn from the same seed on every evaluation
    f = lambda: tn.dropout(x, 0.3, training=True, rng=np.random.default_rng(7))
    return _projected(f, x.shape, rng), {"x": x}


def _case_masked_softmax(rng):
    g = build_skeleton("h36m17")
    M = _rand(rng, 3, 17, 17)
    f = lambda: tn.masked_softmax(M, g.symmetric_kernel)
    return _projected(f, M.shape, rng), {"M": M}


def _case_pair_attention(rng):
    a, b = _rand(rng, 2, 3, 6), _rand(rng, 2, 3, 6)
    f = lambda: tn.pair_attention(a, b, 0.2)
    return _projected(f, (2, 3, 6, 6), rng), {"a": a, "b": b}


def _case_semgconv(rng):
    g = build_skeleton("h36m17")
    layer = SemGConv(4, 6, g.kinematic_kernel, rng, np.float64)
    layer.M.data = 1 + 0.3 * rng.normal(size=layer.M.shape)
    x = _rand(rng, 2, 4, 3, 17)
    f = lambda: layer(x)
    return _projected(f, (2, 6, 3, 17), rng), {"x": x, "W": layer.W, "M": layer.M}


def _global_case(rng, use_bk, use_ck):
    layer = GlobalAttention(8, 17, 2, rng, use_bk=use_bk, use_ck=use_ck, dtype=np.float64)
    layer.C.data = 0.1 * rng.normal(size=layer.C.shape)
    x = _rand(rng, 2, 8, 3, 17)
    f = lambda: layer(x)
    tensors = {"x": x, **dict(layer.named_parameters())}
    return _projected(f, x.shape, rng), tensors


def _case_global_attention(rng):
    return _global_case(rng, True, True)


def _case_global_bk_only(rng):
    return _global_case(rng, True, False)


def _case_global_ck_only(rng):
    return _global_case(rng, False, True)


def _case_graph_attention_block(rng):
    g = build_skeleton("h36m17")
    block = GraphAttentionBlock(8, g, 2, rng, dtype=np.float64)
    x = _rand(rng, 2, 8, 3, 17)
    f = lambda: block(x)
    return _projected(f, x.shape, rng), {"x": x, **dict(block.named_parameters())}


def _temporal_case(rng, strided, causal):
    block = TemporalBlock(6, 3, 3, rng, dropout=0.0, causal=causal, dtype=np.float64)
    T = 9 if strided else 11
    x = _rand(rng, 2, 6, T, 5)
    out_t = block.output_length(T, strided)
    f = lambda: block(x, strided=strided)
    return _projected(f, (2, 6, out_t, 5), rng), {"x": x, **dict(block.named_parameters())}


def _case_temporal_dilated(rng):
    return _temporal_case(rng, False, False)


def _case_temporal_strided(rng):
    return _temporal_case(rng, True, False)


def _case_temporal_causal(rng):
    return _temporal_case(rng, False, True)


def _model_case(rng, strided):
    cfg = GastNetConfig(receptive_field=9, channels=8, heads=2, dropout=0.0)
    model = GastNet(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    for p in model.parameters():
        if not p.data.any():  # zero-initialised C_k and biases
            p.data = 0.1 * rng.normal(size=p.shape)
    T = 9 if strided else 12
    x = _rand(rng, 2, T, 17, 2, scale=0.3)
    y = Tensor(rng.normal(size=(2, T - 8, 17, 3)) * 100)
    # metres keep the loss near 1, so difference round-off stays under ATOL
    f = lambda: mpjpe_loss(model(x, strided=strided), y) * 1e-3
    return f, {"x": x, **dict(model.named_parameters())}


def _case_model_dilated(rng):
    return _model_case(rng, False)


def _case_model_strided(rng):
    return _model_case(rng, True)


def _case_mpjpe_loss(rng):
    p, g = _rand(rng, 2, 3, 17, 3), Tensor(rng.normal(size=(2, 3, 17, 3)))
    return (lambda: mpjpe_loss(p, g)), {"pred": p}


CASES = {
    "conv2d_dilated": _case_conv_dilated,
    "conv2d_strided": _case_conv_strided,
    "conv2d_joint_wide": _case_conv_joint_wide,
    "batchnorm_train": _case_batchnorm_train,
    "batchnorm_eval": _case_batchnorm_eval,
    "dropout_eval": _case_dropout_eval,
    "dropout_train": _case_dropout_train,
    "masked_softmax": _case_masked_softmax,
    "pair_attention": _case_pair_attention,
    "semgconv": _case_semgconv,
    "global_attention": _case_global_attention,
    "global_attention_bk": _case_global_bk_only,
    "global_attention_ck": _case_global_ck_only,
    "graph_attention_block": _case_graph_attention_block,
    "temporal_dilated": _case_temporal_dilated,
    "temporal_strided": _case_temporal_strided,
    "temporal_causal": _case_temporal_causal,
    "mpjpe_loss": _case_mpjpe_loss,
    "model_dilated": _case_model_dilated,
    "model_strided": _case_model_strided,
}


def run_gradcheck(names=None, seed=0, step=STEP):
    """Run the named cases (all by default); returns a list of GradcheckResult."""
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        loss_fn, tensors = CASES[name](rng)
        err, n = check_gradients(loss_fn, tensors, rng, step=step)
        results.append(GradcheckResult(name, err, n))
    return results
