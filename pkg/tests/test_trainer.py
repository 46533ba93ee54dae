import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from wawenet import preprocess as pp
from wawenet import trainer
from wawenet.errors import DegenerateInput, InvalidConfig, InvalidShape

from conftest import mini_net


# -- Adam ------------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = trainer.Adam(lr=0.1)
    opt.step(p, {"w": np.array([0.3, -4.0, 1e-3])})
    assert_allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-5)


def test_adam_two_steps_by_hand():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    p = {"w": np.array([0.5])}
    opt = trainer.Adam(lr, b1, b2, eps)
    g1, g2 = 0.2, -0.1
    opt.step(p, {"w": np.array([g1])})
    opt.step(p, {"w": np.array([g2])})
    m = (1 - b1) * (b1 * g1 + g2)
    v = (1 - b2) * (b2 * g1 * g1 + g2 * g2)
    step2 = lr * (m / (1 - b1 ** 2)) / (math.sqrt(v / (1 - b2 ** 2)) + eps)
    step1 = lr * g1 / (abs(g1) + eps)
    assert p["w"][0] == pytest.approx(0.5 - step1 - step2, abs=1e-12)


def test_adam_keeps_parameter_dtype():
    p = {"w": np.ones(3, np.float32)}
    trainer.Adam().step(p, {"w": np.ones(3)})
    assert p["w"].dtype == np.float32


# -- learning-rate schedule -------------------------------------------------

def _run_schedule(values):
    st_ = trainer.TrainState(lr=1e-4)
    lrs = []
    for v in values:
        trainer.schedule_update(st_, v)
        lrs.append(st_.lr)
    return lrs


def test_plateau_of_five_epochs_decays_lr():
    lrs = _run_schedule([0.5] + [0.49995] * 5)
    assert lrs[:5] == [1e-4] * 5
    assert lrs[5] == pytest.approx(1e-5)


def test_improvement_of_exactly_the_threshold_counts():
    lrs = _run_schedule([0.5, 0.4999, 0.4999, 0.4999, 0.4999, 0.4999])
    assert lrs[-1] == 1e-4
    lrs = _run_schedule([0.5, 0.4999, 0.4999, 0.4999, 0.4999, 0.4999, 0.4999])
    assert lrs[-1] == pytest.approx(1e-5)


def test_steady_improvement_keeps_lr():
    assert _run_schedule([1.0 - 0.01 * k for k in range(30)]) == [1e-4] * 30


def test_counter_resets_after_decay():
    lrs = _run_schedule([0.5] * 11)
    assert lrs[5] == pytest.approx(1e-5)
    assert lrs[9] == pytest.approx(1e-5)
    assert lrs[10] == pytest.approx(1e-6)


def test_comparison_is_against_best_so_far():
    # small gains relative to the previous epoch but not to the best
    lrs = _run_schedule([0.5, 0.6, 0.55, 0.52, 0.51, 0.505])
    assert lrs[-1] == pytest.approx(1e-5)


# -- metrics ------------------------------------------------------------------

def test_metrics_identity_and_negation():
    t = np.array([0.1, -0.4, 0.7, 0.2])
    rep = trainer.metrics(t, t)
    assert rep.rho == [1.0] and rep.rmse == [0.0]
    assert trainer.metrics(-t + t.mean() * 2, t).rho[0] == pytest.approx(-1.0)


def test_metrics_degenerate():
    with pytest.raises(DegenerateInput):
        trainer.metrics(np.ones(4), np.arange(4.0))
    rep = trainer.metrics(np.ones(4), np.arange(4.0), strict=False)
    assert math.isnan(rep.rho[0])
    with pytest.raises(InvalidShape):
        trainer.metrics(np.ones(3), np.ones(4))


@pytest.mark.parametrize("name,rmse,pct", [("MOS", 0.31, 7.8), ("SIIBGauss", 35.1, 4.7)])
def test_normalized_rmse(name, rmse, pct):
    t = np.array([1.0, 2.0, 3.0, 4.0])
    e = t + rmse * np.array([1, -1, 1, -1])
    rep = trainer.metrics(e, t, [pp.TARGETS[name]])
    assert rep.rmse[0] == pytest.approx(rmse)
    assert abs(rep.nrmse[0] - pct) <= 0.05 + 1e-9


@given(arrays(np.float64, 12, elements=st.floats(-5, 5)), arrays(np.float64, 12, elements=st.floats(-5, 5)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_correlation_is_affine_invariant(e, t, a, b):
    try:
        base = trainer.pearson(e, t)
        moved = trainer.pearson(a * e + b, a * t + b)
    except DegenerateInput:
        return
    if np.std(e) < 1e-3 or np.std(t) < 1e-3:
        return
    assert moved == pytest.approx(base, abs=1e-12)


@given(st.permutations(range(6)))
def test_condition_metrics_ignore_order_within_condition(perm):
    rng = np.random.default_rng(0)
    est, tgt = rng.standard_normal(12), rng.standard_normal(12)
    cond = ["a"] * 6 + ["b"] * 3 + ["c"] * 3
    base = trainer.metrics(est, tgt, conditions=cond)
    idx = list(perm) + list(range(6, 12))
    moved = trainer.metrics(est[idx], tgt[idx], conditions=[cond[i] for i in idx])
    assert moved.condition_rho[0] == pytest.approx(base.condition_rho[0], abs=1e-12)
    assert moved.condition_rmse[0] == pytest.approx(base.condition_rmse[0], abs=1e-12)


def test_condition_means_oracle():
    est = np.array([1.0, 3.0, 10.0, 14.0, 0.0, 2.0])
    tgt = np.array([2.0, 2.0, 11.0, 11.0, 1.0, 1.0])
    rep = trainer.metrics(est, tgt, conditions=["x", "x", "y", "y", "z", "z"])
    assert rep.condition_rmse[0] == pytest.approx(math.sqrt((0 + 1 + 0) / 3))


# -- training loop -----------------------------------------------------------

def _toy_records(n, seed, length=48):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        loud = i % 2 == 0
        x = rng.standard_normal(length) * (1.0 if loud else 0.2)
        recs.append(pp.SegmentRecord(x.astype(np.float32), 1.0, 0.0, source=f"s{i}",
                                     targets={"MOS": 0.8 if loud else -0.8}))
    return recs


def _toy_net(seed):
    return mini_net(seed=seed, dtype=np.float32, channels=8)


def _dataset_mse(net, recs):
    est = trainer.predict(net, recs)
    t = np.array([[r.targets["MOS"]] for r in recs])
    return float(np.mean((est - t) ** 2))


def test_batches_per_epoch():
    assert trainer.batches_per_epoch(300, 60, False) == 5
    assert trainer.batches_per_epoch(300, 60, True) == 10
    assert trainer.batches_per_epoch(61, 60, False) == 1


def test_fit_step_count_and_early_stop():
    recs = _toy_records(300, 0)
    net = _toy_net(0)
    cfg = trainer.FitConfig(epochs=3, target_names=("MOS",))
    _, state = trainer.fit(net, recs, recs[:20], cfg, on_epoch=lambda s: True)
    assert state.epoch == 1 and state.adam.t == 10 and len(state.log) == 1


def test_loss_decreases_over_first_epoch():
    passes = 0
    for seed in range(5):
        recs = _toy_records(120, seed)
        net = _toy_net(seed)
        before = _dataset_mse(net, recs)
        trainer.fit(net, recs, recs[:10], trainer.FitConfig(epochs=1, batch=20, seed=seed, lr=1e-3,
                                                             target_names=("MOS",)))
        passes += _dataset_mse(net, recs) <= before
    assert passes >= 4


def test_fit_is_deterministic():
    recs = _toy_records(40, 1)
    logs, weights = [], []
    for _ in range(2):
        net = _toy_net(3)
        _, state = trainer.fit(net, recs[:30], recs[30:],
                               trainer.FitConfig(epochs=2, batch=8, seed=7, target_names=("MOS",)))
        logs.append([(e.train_mse, e.val_rmse, e.val_rho) for e in state.log])
        weights.append(net.state())
    assert logs[0] == logs[1]
    for k in weights[0]:
        assert_array_equal(weights[0][k], weights[1][k])


def test_fit_rejects_bad_setup():
    recs = _toy_records(4, 0)
    with pytest.raises(InvalidConfig):
        trainer.fit(_toy_net(0), recs, [], trainer.FitConfig(target_names=("MOS",)))
    with pytest.raises(InvalidConfig):
        trainer.fit(_toy_net(0), recs, recs, trainer.FitConfig(target_names=("MOS", "NOI")))


def test_l2_penalty_covers_weights_only(rng):
    net = mini_net()
    x, t = rng.standard_normal((3, 1, 48)), np.zeros((3, 1))
    plain = trainer.loss_and_grad(net, x, t, l2=0.0)
    pen = trainer.loss_and_grad(net, x, t, l2=0.5)
    params = net.named_parameters()
    expected = 0.5 * sum(float(np.sum(p ** 2)) for k, p in params.items() if k.endswith(".weight"))
    assert pen.penalty == pytest.approx(expected)
    for k in params:
        diff = pen.grads[k] - plain.grads[k]
        if k.endswith(".weight"):
            assert_allclose(diff, params[k], rtol=1e-12, atol=1e-12)
        else:
            assert_array_equal(diff, 0)
