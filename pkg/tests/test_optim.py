import numpy as np
import pytest

from sparsepo.optim import AdamW, OptimizerState, ParamGroup, adamw_step, clip_grad_norm, lr_multiplier
from sparsepo.tensor import Tensor


def test_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.5, -2.0]))
    adamw_step([p], [np.zeros(2)], OptimizerState(), lr=0.1)
    assert np.array_equal(p.data, [1.5, -2.0])


def test_first_step_hand_value():
    p = Tensor(np.array([0.0]))
    adamw_step([p], [np.array([1.0])], OptimizerState(), lr=0.1)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_decay_with_zero_grad_shrinks():
    p = Tensor(np.array([2.0]))
    adamw_step([p], [np.zeros(1)], OptimizerState(), lr=0.1, wd=0.5)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adamw_step([Tensor(np.zeros(2))], [np.zeros(3)], OptimizerState(), lr=0.1)


def test_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4)
    p = Tensor(x.copy())
    st = OptimizerState()
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adamw_step([p], [g], st, lr=0.01, wd=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)


def test_groups_use_their_own_rates_and_state_round_trips():
    a, b = Tensor(np.ones(2), True), Tensor(np.ones(3), True)
    opt = AdamW([ParamGroup("policy", [a], 0.1), ParamGroup("mask", [b], 0.01, 0.5)])
    a.grad, b.grad = np.ones(2), np.ones(3)
    opt.step()
    assert a.data[0] == pytest.approx(1 - 0.1, abs=1e-7)
    assert b.data[0] == pytest.approx(1 * (1 - 0.005) - 0.01, abs=1e-7)
    sd = opt.state_dict()
    other = AdamW([ParamGroup("policy", [a], 0.1), ParamGroup("mask", [b], 0.01, 0.5)])
    other.load_state_dict(sd)
    assert other.state.step == 1 and np.array_equal(other.state.m["mask/0"], opt.state.m["mask/0"])


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == 5.0
    np.testing.assert_allclose(np.linalg.norm(a.grad), 1.0, atol=1e-9)
    a.grad = np.array([3.0, 4.0])
    clip_grad_norm([a], 0.0)
    assert np.array_equal(a.grad, [3.0, 4.0])


def test_lr_schedules():
    assert lr_multiplier(0, 10, 0.2, "constant") == 0.5
    assert lr_multiplier(5, 10, 0.0, "constant") == 1.0
    assert lr_multiplier(5, 10, 0.0, "linear") == 0.5
    with pytest.raises(ValueError):
        lr_multiplier(0, 10, 0.0, "cosine")
