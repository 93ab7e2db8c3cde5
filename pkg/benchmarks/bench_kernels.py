"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--channels 32]

Reports per-call microseconds for the attention softmax (forward/backward),
the max absolute difference between the two paths, and the wall time of one
training step of an RF-27 model under each backend.
"""
import argparse
import time

import numpy as np

from gastnet import _kernels, tensor as tn
from gastnet.metrics import mpjpe_loss
from gastnet.model import GastNetConfig, build_model


def timeit(fn, repeat):
    fn()  # warm-up (and numba compilation)
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def bench_pair(repeat, rng):
    # 16 windows x 4 heads x 9 frames of 17-joint attention
    M, N = 16 * 4 * 9, 17
    a = rng.normal(size=(M, N)).astype(np.float32)
    b = rng.normal(size=(M, N)).astype(np.float32)
    g = rng.normal(size=(M, N, N)).astype(np.float32)
    rows = []
    out_np = _kernels.pair_softmax_fwd_numpy(a, b, 0.2)
    t_np = timeit(lambda: _kernels.pair_softmax_fwd_numpy(a, b, 0.2), repeat)
    tb_np = timeit(lambda: _kernels.pair_softmax_bwd_numpy(out_np, a, b, g, 0.2), repeat)
    if not _kernels.HAS_NUMBA:
        rows.append(("pair_softmax fwd", t_np, None, None))
        rows.append(("pair_softmax bwd", tb_np, None, None))
        return rows
    out_nb = _kernels.pair_softmax_fwd_numba(a, b, 0.2)
    t_nb = timeit(lambda: _kernels.pair_softmax_fwd_numba(a, b, 0.2), repeat)
    tb_nb = timeit(lambda: _kernels.pair_softmax_bwd_numba(out_np, a, b, g, 0.2), repeat)
    ga_np, gb_np = _kernels.pair_softmax_bwd_numpy(out_np, a, b, g, 0.2)
    ga_nb, gb_nb = _kernels.pair_softmax_bwd_numba(out_np, a, b, g, 0.2)
    rows.append(("pair_softmax fwd", t_np, t_nb, np.abs(out_np - out_nb).max()))
    rows.append(("pair_softmax bwd", tb_np, tb_nb,
                 max(np.abs(ga_np - ga_nb).max(), np.abs(gb_np - gb_nb).max())))
    return rows


def bench_step(channels, repeat, rng):
    model = build_model(GastNetConfig(receptive_field=27, channels=channels), seed=0)
    x = rng.normal(size=(16, 27, 17, 2)).astype(np.float32)
    y = tn.Tensor(rng.normal(size=(16, 1, 17, 3)).astype(np.float32))
    step_rng = np.random.default_rng(0)

    def step():
        loss = mpjpe_loss(model(x, strided=True, rng=step_rng), y)
        model.zero_grad()
        tn.backward(loss)

    saved = _kernels.USE_NUMBA
    try:
        _kernels.USE_NUMBA = False
        t_np = timeit(step, repeat)
        t_nb = None
        if _kernels.HAS_NUMBA:
            _kernels.USE_NUMBA = True
            t_nb = timeit(step, repeat)
    finally:
        _kernels.USE_NUMBA = saved
    return ("train step (b=16, RF 27)", t_np, t_nb, None)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--channels", type=int, default=32)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = bench_pair(args.repeat, rng)
    rows.append(bench_step(args.channels, max(args.repeat // 5, 3), rng))
    print(f"{'kernel':28s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, t_np, t_nb, diff in rows:
        nb = f"{t_nb * 1e6:10.1f}" if t_nb else f"{'n/a':>10s}"
        sp = f"{t_np / t_nb:8.2f}" if t_nb else f"{'':>8s}"
        df = f"{diff:10.2e}" if diff is not None else f"{'':>10s}"
        print(f"{name:28s} {t_np * 1e6:10.1f} {nb} {sp} {df}")


if __name__ == "__main__":
    main()
