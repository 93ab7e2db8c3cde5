import csv
import math

import numpy as np
import pytest

from gastnet import tensor as tn
from gastnet.errors import ConfigError, DataError, ShapeError
from gastnet.graph import SemGConv
from gastnet.data import synth_dataset
from gastnet.metrics import mpjpe, mpjpe_loss, p_mpjpe, procrustes_align
from gastnet.model import GastNetConfig, build_model
from gastnet.skeleton import build_skeleton
from gastnet.train import (LOG_COLUMNS, OptimizerState, TrainConfig, WindowSet, amsgrad_step,
                           evaluate, lr_at_epoch, train, write_loss_csv)

import oracles


# -- metrics ------------------------------------------------------------------

def test_mpjpe_basics():
    r = np.random.default_rng(0)
    x = r.normal(size=(2, 3, 17, 3)) * 100
    assert mpjpe(x, x) == 0.0
    assert abs(mpjpe(x + [10.0, 0, 0], x) - 10.0) <= 1e-9
    y = r.normal(size=x.shape) * 100
    assert abs(mpjpe(x, y) - oracles.mpjpe(x, y)) <= 1e-9
    with pytest.raises(ShapeError):
        mpjpe(x, x[0])


def test_mpjpe_translation_bound():
    r = np.random.default_rng(1)
    x, y = r.normal(size=(2, 4, 17, 3)) * 50
    c = r.normal(size=3) * 20
    assert mpjpe(x + c, y) <= mpjpe(x, y) + np.linalg.norm(c) + 1e-9


def test_mpjpe_loss_matches_metric():
    r = np.random.default_rng(2)
    x, y = r.normal(size=(2, 3, 1, 17, 3))
    assert abs(mpjpe_loss(tn.Tensor(x), tn.Tensor(y)).item() - mpjpe(x, y)) <= 1e-12


def test_procrustes_rigid_and_scale():
    r = np.random.default_rng(3)
    for _ in range(20):
        gt = r.normal(size=(17, 3)) * 200
        R = oracles.random_rotation(r)
        pred = gt @ R.T + r.normal(size=3) * 300
        assert p_mpjpe(pred[None], gt[None]) < 1e-6
    assert p_mpjpe(2 * gt[None], gt[None]) < 1e-6
    np.testing.assert_allclose(procrustes_align(gt, gt), gt, atol=1e-9)


def test_procrustes_reflection_guard():
    r = np.random.default_rng(4)
    gt = r.normal(size=(17, 3))
    mirrored = gt * [-1, 1, 1]
    aligned = procrustes_align(mirrored, gt)
    # a proper rotation cannot undo a reflection of a generic point set
    assert np.linalg.norm(aligned - gt, axis=-1).mean() > 1e-3


def test_p_mpjpe_not_above_mpjpe():
    r = np.random.default_rng(5)
    for _ in range(50):
        a, b = r.normal(size=(2, 3, 17, 3)) * 100
        assert p_mpjpe(a, b) <= mpjpe(a, b) + 1e-9


def test_collapsed_prediction_can_exceed_mpjpe():
    # the fitted transform minimises squared error, so with an outlier-heavy
    # target the centroid is a worse mean-distance fit than the raw prediction
    gt = np.arange(51.0).reshape(17, 3)
    gt[0, 0], gt[16, 0] = 412.0, 1048.0
    pred = np.zeros_like(gt)
    np.testing.assert_allclose(procrustes_align(pred, gt), np.broadcast_to(gt.mean(0), gt.shape))
    assert p_mpjpe(pred[None], gt[None]) > mpjpe(pred[None], gt[None])


def test_procrustes_errors():
    with pytest.raises(ValueError):
        procrustes_align(np.ones((17, 3)), np.zeros((17, 3)))
    with pytest.raises(ShapeError):
        procrustes_align(np.ones((2, 3)), np.ones((2, 3)))


# -- optimizer ---------------------------------------------------------------------

def run_scalar(grads, lr=0.001, correct=True):
    p = {"w": np.zeros(1)}
    st = OptimizerState(correct_second_moment=correct)
    out = []
    for g in grads:
        amsgrad_step(p, {"w": np.array([g])}, st, lr)
        out.append(p["w"][0])
    return out, st


@pytest.mark.parametrize("correct", [True, False])
def test_amsgrad_scalar_oracle(correct):
    grads = [1.0, 1.0, -0.5, 2.0, 0.0, -3.0, 0.1]
    got, _ = run_scalar(grads, correct=correct)
    ref = oracles.amsgrad_scalar(grads, 0.001, correct_v=correct)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_amsgrad_first_step_hand_values():
    got, _ = run_scalar([1.0])
    assert abs(got[0] + 0.001 / (1 + 1e-8)) <= 1e-15
    got, _ = run_scalar([1.0], correct=False)
    assert abs(got[0] + 0.001 / (math.sqrt(0.001) + 1e-8)) <= 1e-15


def test_amsgrad_zero_gradient_first_step():
    p = {"w": np.array([1.5, -2.0])}
    amsgrad_step(p, {"w": np.zeros(2)}, OptimizerState(), 0.01)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])


def test_amsgrad_vmax_non_decreasing():
    r = np.random.default_rng(6)
    p = {"w": r.normal(size=10)}
    st = OptimizerState()
    prev = np.zeros(10)
    for _ in range(50):
        amsgrad_step(p, {"w": r.normal(size=10) * r.uniform(0, 3)}, st, 0.01)
        assert (st.v_max["w"] >= prev).all()
        assert st.v_max["w"].shape == p["w"].shape
        prev = st.v_max["w"].copy()


def test_amsgrad_skips_missing_gradients():
    p = {"a": np.ones(2), "b": np.ones(2)}
    amsgrad_step(p, {"a": np.ones(2)}, OptimizerState(), 0.1)
    np.testing.assert_array_equal(p["b"], 1.0)
    assert (p["a"] < 1).all()


def test_step_with_numeric_gradient_matches_autodiff():
    r = np.random.default_rng(7)
    g = build_skeleton("h36m17")
    layer = SemGConv(2, 2, g.kinematic_kernel, r, np.float64)
    x = tn.Tensor(r.normal(size=(1, 2, 2, 17)))

    def loss():
        return tn.tsum(tn.square(layer(x)))

    layer.W.grad = None
    tn.backward(loss())
    auto = layer.W.grad.copy()
    numeric = np.zeros_like(auto)
    h = 1e-6
    for i in np.ndindex(auto.shape):
        orig = layer.W.data[i]
        layer.W.data[i] = orig + h
        fp = loss().item()
        layer.W.data[i] = orig - h
        fm = loss().item()
        layer.W.data[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
    pa = {"w": layer.W.data.copy()}
    pn = {"w": layer.W.data.copy()}
    amsgrad_step(pa, {"w": auto}, OptimizerState(), 0.01)
    amsgrad_step(pn, {"w": numeric}, OptimizerState(), 0.01)
    assert (np.abs(pa["w"] - pn["w"]) <= 1e-6 * np.abs(pa["w"])).all()


# -- schedule ---------------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg) == 0.001
    assert abs(lr_at_epoch(1, cfg) - 0.00095) <= 1e-15
    assert lr_at_epoch(80, TrainConfig(lr_decay=1.0)) == 0.001
    with pytest.raises(ValueError):
        lr_at_epoch(-1, cfg)


def test_train_config_validation():
    TrainConfig(lr_decay=1.0)
    for kw in ({"lr_decay": 0.0}, {"lr_decay": 1.5}, {"batch_size": 0}, {"lr0": -1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


# -- training --------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(seed=2, n_sequences=2, length=24)


def tiny_model(seed=0):
    return build_model(GastNetConfig(receptive_field=9, channels=8, heads=2), seed=seed)


def test_windows_cover_every_frame(tiny_data):
    w = WindowSet(tiny_data, 9, causal=False)
    assert len(w) == 48
    x, y = w.batch(np.array([0, 47]))
    assert x.shape == (2, 9, 17, 2) and y.shape == (2, 1, 17, 3)


def test_windows_need_targets(tiny_data):
    with pytest.raises(DataError):
        WindowSet([(tiny_data[0][0], None)], 9, False)


def test_training_is_deterministic(tiny_data):
    cfg = TrainConfig(batch_size=16, epochs=2, seed=3)
    a = train(tiny_model(), tiny_data, cfg)
    b = train(tiny_model(), tiny_data, cfg)
    assert [r["train_mpjpe_mm"] for r in a.log] == [r["train_mpjpe_mm"] for r in b.log]
    pa, pb = dict(a.model.named_parameters()), dict(b.model.named_parameters())
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_zero_lr_keeps_parameters(tiny_data):
    m = tiny_model()
    before = {k: p.data.copy() for k, p in m.named_parameters()}
    train(m, tiny_data, TrainConfig(batch_size=16, epochs=1, lr0=0.0))
    assert all(np.array_equal(before[k], p.data) for k, p in m.named_parameters())


def test_loss_trend_decreases():
    data = synth_dataset(seed=4, n_sequences=4, length=40)
    res = train(tiny_model(), data, TrainConfig(batch_size=16, epochs=20, lr0=0.01, dropout=0.0))
    loss = np.array([r["train_mpjpe_mm"] for r in res.log])
    means = loss.reshape(4, 5).mean(axis=1)
    assert (np.diff(means) < 0).all(), means


def test_evaluate_and_loss_csv(tmp_path, tiny_data):
    m = tiny_model()
    res = train(m, tiny_data, TrainConfig(batch_size=16, epochs=2), eval_pairs=tiny_data)
    path = tmp_path / "loss.csv"
    write_loss_csv(res.log, path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 3
    ev = evaluate(m, tiny_data)
    agg = ev["aggregate"]
    weighted = sum(r["mpjpe_mm"] * r["frames"] for r in ev["sequences"]) / agg["frames"]
    assert abs(weighted - agg["mpjpe_mm"]) <= 1e-9
    assert agg["p_mpjpe_mm"] <= agg["mpjpe_mm"]
    assert abs(float(rows[-1][3]) - agg["mpjpe_mm"]) < 1e-5


def test_train_rejects_missing_targets(tiny_data):
    with pytest.raises(DataError):
        train(tiny_model(), [(tiny_data[0][0], None)], TrainConfig(epochs=1))
