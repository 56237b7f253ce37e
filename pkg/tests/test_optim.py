import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from byol.optim import (LARS, PRESETS, ParamGroup, Schedule, group_multipliers, lars_step, lars_update, lr_at,
                        make_groups, sgd_nesterov_step, tau_at)
from byol.tensor import Tensor

seeds = st.integers(0, 2**31 - 1)


def test_groups_exclude_bias_and_bn():
    names = ["encoder.0.weight", "encoder.0.bias", "encoder.0.bn_gamma", "encoder.0.bn_beta",
             "projector.1.weight", "predictor.0.bias"]
    for g in make_groups(names):
        assert g.lars_adapt == g.weight_decay == (g.role == "weight")
    roles = {n: g.role for g in make_groups(names) for n in g.names}
    assert roles["encoder.0.bn_beta"] == "bn" and roles["predictor.0.bias"] == "bias"


def test_lr_schedule_examples():
    s = Schedule(base_lr=0.2, batch_size=512, warmup_steps=10, total_steps=110)
    assert s.peak_lr == pytest.approx(0.4)
    assert lr_at(0, s) == 0.0
    assert lr_at(10, s) == pytest.approx(0.4)
    assert lr_at(60, s) == pytest.approx(0.2)
    assert lr_at(110, s) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        lr_at(111, s)
    with pytest.raises(ValueError):
        Schedule(warmup_steps=5, total_steps=4)


def test_tau_schedule_examples():
    s = Schedule(tau_base=0.996, total_steps=1000)
    assert tau_at(0, s) == 0.996
    assert tau_at(1000, s) == 1.0
    assert tau_at(500, s) == pytest.approx(0.998, abs=1e-15)


@given(K=st.integers(1, 500), warm=st.integers(0, 50), tau_base=st.floats(0, 1))
def test_schedules_monotone(K, warm, tau_base):
    s = Schedule(warmup_steps=min(warm, K), total_steps=K, tau_base=tau_base)
    taus = [tau_at(k, s) for k in range(K + 1)]
    assert all(b >= a for a, b in zip(taus, taus[1:]))
    lrs = [lr_at(k, s) for k in range(s.warmup_steps, K + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))


def test_lars_hand_computed_trust_ratio():
    w, buf = lars_update(np.array([3.0, 4.0]), np.array([0.6, 0.8]), np.zeros(2), lr=1.0, momentum=0.0,
                         weight_decay=0.0, eta=0.001)
    assert np.allclose(w, np.array([3.0, 4.0]) - 0.005 * np.array([0.6, 0.8]))


def test_lars_zero_gradient_is_no_op():
    w, buf = lars_update(np.array([1.0, 2.0]), np.zeros(2), np.zeros(2), 1.0, 0.9, 0.0, 0.001)
    assert np.array_equal(w, [1.0, 2.0])


@given(seed=seeds, eta=st.floats(1e-4, 10))
def test_lars_bias_is_plain_momentum_sgd(seed, eta):
    rng = np.random.default_rng(seed)
    b, g, buf = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    w, nb = lars_update(b, g, buf, 0.1, 0.9, 1e-2, eta, adapt=False)
    assert np.allclose(nb, 0.9 * buf + 0.1 * g) and np.allclose(w, b - nb)


@given(seed=seeds)
def test_lars_unit_trust_ratio_reduces_to_sgd_with_decay(seed):
    rng = np.random.default_rng(seed)
    w, g, buf = rng.normal(size=5), rng.normal(size=5), rng.normal(size=5)
    wd = 0.01
    eta = np.linalg.norm(g + wd * w) / np.linalg.norm(w)  # makes the trust ratio 1 (up to eps)
    new_w, new_buf = lars_update(w, g, buf, 0.05, 0.9, wd, eta * (1 + 1e-9 / np.linalg.norm(g + wd * w)))
    expect_buf = 0.9 * buf + 0.05 * (g + wd * w)
    assert np.allclose(new_buf, expect_buf, rtol=1e-12) and np.allclose(new_w, w - expect_buf, rtol=1e-12)


def test_lars_decay_never_touches_excluded():
    params = {"a.0.weight": Tensor(np.ones(3)), "a.0.bias": Tensor(np.ones(3)), "a.0.bn_gamma": Tensor(np.ones(3))}
    for p in params.values():
        p.grad = np.zeros(3)
    lars_step(make_groups(params), params, lr=1.0, momentum=0.0, weight_decay=0.5, eta=1e-3)
    assert np.array_equal(params["a.0.bias"].data, np.ones(3))
    assert np.array_equal(params["a.0.bn_gamma"].data, np.ones(3))
    assert not np.array_equal(params["a.0.weight"].data, np.ones(3))


def test_lars_non_finite_names_parameter():
    params = {"enc.0.weight": Tensor(np.ones(2))}
    params["enc.0.weight"].grad = np.array([np.nan, 1.0])
    with pytest.raises(FloatingPointError, match="enc.0.weight"):
        LARS(make_groups(params)).step(params, 0.1)


def test_nesterov_examples():
    p = {"x": Tensor(np.array([1.0]))}
    p["x"].grad = np.array([2.0])
    sgd_nesterov_step(p, 0.1, 0.0, {})
    assert p["x"].data == pytest.approx(0.8)
    p["x"].grad = np.zeros(1)
    sgd_nesterov_step(p, 0.1, 0.9, {})
    assert p["x"].data == pytest.approx(0.8)


def test_nesterov_beats_sgd_on_quadratic_bowl():
    def two_steps(mu):
        p, bufs = {"x": Tensor(np.array([1.0]))}, {}
        for _ in range(2):
            p["x"].grad = p["x"].data.copy()  # d/dx x^2/2
            sgd_nesterov_step(p, 0.1, mu, bufs)
        return float(p["x"].data[0])

    # hand-rolled: buf1 = 1, x1 = 1 - 0.1*(1 + 0.9) = 0.81; buf2 = 0.9 + 0.81 = 1.71, x2 = 0.81 - 0.1*(0.81 + 1.539)
    assert two_steps(0.9) == pytest.approx(0.81 - 0.1 * (0.81 + 0.9 * 1.71))
    assert two_steps(0.9) < two_steps(0.0) == pytest.approx(0.81)


def test_nesterov_non_finite_errors():
    p = {"x": Tensor(np.array([1.0]))}
    p["x"].grad = np.array([np.inf])
    with pytest.raises(FloatingPointError):
        sgd_nesterov_step(p, 0.1, 0.9, {})


def _mlp_params(seed=0):
    rng = np.random.default_rng(seed)
    names = ["encoder.0.weight", "projector.0.weight", "predictor.0.weight", "predictor.0.bias"]
    return {n: Tensor(rng.normal(size=(4, 3))) for n in names}


def _run(groups, lam_steps=1, params=None):
    params = params or _mlp_params()
    rng = np.random.default_rng(1)
    opt = LARS(groups, momentum=0.9, weight_decay=0.0, eta=1e-3)
    for _ in range(lam_steps):
        for p in params.values():
            p.grad = rng.normal(size=p.data.shape)
        opt.step(params, 0.1)
    return params


def test_multipliers_identity_is_bit_identical():
    a = _run(make_groups(_mlp_params()))
    b = _run(group_multipliers(make_groups(_mlp_params()), 1.0, 1.0))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_predictor_multiplier_zero_freezes_predictor():
    start = _mlp_params()
    out = _run(group_multipliers(make_groups(start), 0.0, 1.0), lam_steps=3)
    assert np.array_equal(out["predictor.0.weight"].data, _mlp_params()["predictor.0.weight"].data)
    assert not np.array_equal(out["encoder.0.weight"].data, _mlp_params()["encoder.0.weight"].data)


def test_predictor_multiplier_ten_scales_first_update():
    def update_norm(lam):
        params = _mlp_params()
        groups = group_multipliers(make_groups(params), lam, 1.0)
        for g in groups:
            g.lars_adapt = False
        before = params["predictor.0.weight"].data.copy()
        _run(groups, params=params)
        return np.linalg.norm(params["predictor.0.weight"].data - before)

    assert update_norm(10.0) / update_norm(1.0) == pytest.approx(10.0, rel=0.05)
    with pytest.raises(ValueError):
        group_multipliers([ParamGroup(["x"], "weight", "predictor")], -1.0)


def test_presets():
    assert (PRESETS["full"].base_lr, PRESETS["full"].weight_decay, PRESETS["full"].tau_base) == (0.2, 1.5e-6, 0.996)
    assert (PRESETS["ablation"].base_lr, PRESETS["ablation"].weight_decay, PRESETS["ablation"].tau_base) == \
        (0.3, 1e-6, 0.99)
    assert PRESETS["small-batch"].tau_base == 0.9995


def test_optimizer_state_round_trip():
    params = _mlp_params()
    opt = LARS(make_groups(params))
    for p in params.values():
        p.grad = np.ones_like(p.data)
    opt.step(params, 0.1)
    clone = LARS(make_groups(params))
    clone.load_state_arrays(opt.state_arrays())
    assert all(np.array_equal(clone.buffers[k], opt.buffers[k]) for k in opt.buffers)
