"""Model fixtures shared by several test modules."""
import numpy as np

from gastnet.model import GastNetConfig, build_model


def randomize(model, seed=0, scale=0.3):
    """Give zero-initialised tensors (C_k, output layer, biases) and batchnorm
    statistics random values so that every path carries signal."""
    r = np.random.default_rng(seed)
    for p in model.parameters():
        if not p.data.any():
            p.data = (scale * r.normal(size=p.shape)).astype(p.dtype)
    for bn in model.batchnorms():
        bn.running_mean[:] = 0.1 * r.normal(size=bn.running_mean.shape)
        bn.running_var[:] = r.uniform(0.5, 1.5, bn.running_var.shape)
    model.eval()
    return model


def random_model(rf=27, channels=16, heads=2, causal=False, seed=0, dtype=np.float64, **kw):
    cfg = GastNetConfig(receptive_field=rf, channels=channels, heads=heads, causal=causal, **kw)
    return randomize(build_model(cfg, seed=seed, dtype=dtype), seed + 1)


def closed_form_param_count(C, n_blocks, N=17, K=4, k=3, streams=3):
    """Parameter count written out per layer from the architecture description."""
    sem = C * C + C * N * N + 2 * C  # W, M, stream batchnorm
    glob = 2 * C * C + 2 * C + K * N * N + C * C + 2 * C  # theta, phi, w_f, C_k, W, batchnorm
    gab = {1: sem, 2: 2 * sem, 3: 2 * sem + glob}[streams] + C * streams * C
    tcb = C * C * k + 2 * C + C * C + 2 * C
    stem = 4 + C * 2 * k + 2 * C
    head = 3 * C + 3
    return stem + (n_blocks + 1) * gab + n_blocks * tcb + head
