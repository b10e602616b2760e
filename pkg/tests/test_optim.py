import numpy as np
import pytest

import oracles as O
from aligncl.optim import AdamW, LinearSchedule
from aligncl.tensor import NonFiniteError, Tensor


def _opt(params, lr=0.1, total=100, warmup=0.0, wd=0.01):
    return AdamW(params, LinearSchedule(lr, total, warmup), wd)


def test_zero_gradient_without_decay_leaves_params_unchanged():
    w = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    before = w.data.copy()
    _opt({"w": w}, wd=0.0).step({"w": np.zeros((3, 2))})
    np.testing.assert_array_equal(w.data, before)


def test_scalar_step_matches_hand_computation():
    # one step, g = 1, lr 0.1: bias-corrected moments are 1 and 1
    p = Tensor(np.array([1.0]))
    _opt({"p": p}).step({"p": np.array([1.0])})
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(O.adamw_scalar(1.0, [1.0], [0.1], 0.01, decay=False), abs=1e-15)


def test_matrix_step_applies_decoupled_decay():
    w = Tensor(np.array([[1.0]]))
    _opt({"w": w}).step({"w": np.array([[1.0]])})
    assert w.data[0, 0] == pytest.approx(0.899000001, abs=1e-15)
    assert w.data[0, 0] == pytest.approx(O.adamw_scalar(1.0, [1.0], [0.1], 0.01), abs=1e-15)


def test_three_steps_match_loop_oracle():
    w = Tensor(np.array([[1.0]]))
    lrs = [0.1, 0.05, 0.02]

    class Fixed(LinearSchedule):
        def __call__(self, step):
            return lrs[step]

    opt = AdamW({"w": w}, Fixed(0.1, 3), 0.01)
    for g in (1.0, -0.5, 2.0):
        opt.step({"w": np.array([[g]])})
    expected = O.adamw_scalar(1.0, [1.0, -0.5, 2.0], lrs, 0.01)
    assert w.data[0, 0] == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.8718943705494947, abs=1e-15)


def test_decay_never_enters_the_moments():
    w = Tensor(np.full((2, 2), 5.0))
    opt = _opt({"w": w}, wd=0.5)
    opt.step({"w": np.zeros((2, 2))})
    np.testing.assert_array_equal(opt.state.m["w"], 0.0)
    np.testing.assert_array_equal(opt.state.v["w"], 0.0)
    np.testing.assert_allclose(w.data, 5.0 * (1 - 0.1 * 0.5), rtol=1e-15)


def test_only_parameters_with_gradients_move():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))
    opt = _opt({"a": a, "b": b})
    opt.step({"a": np.ones((2, 2))})
    np.testing.assert_array_equal(b.data, 1.0)
    assert "b" not in opt.state.m and opt.state.steps["a"] == 1


def test_moments_share_parameter_shapes():
    w = Tensor(np.zeros((4, 3)))
    opt = _opt({"w": w})
    opt.step({"w": np.ones((4, 3))})
    assert opt.state.m["w"].shape == opt.state.v["w"].shape == (4, 3)


def test_non_finite_gradient_rejected_before_any_update():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))
    opt = _opt({"a": a, "b": b})
    with pytest.raises(NonFiniteError):
        opt.step({"a": np.ones((2, 2)), "b": np.array([[np.nan, 0], [0, 0]])})
    np.testing.assert_array_equal(a.data, 1.0)


def test_schedule_endpoints():
    s = LinearSchedule(2e-5, 200, 0.1)
    assert s.warmup_steps == 20
    assert s(0) == 0.0
    assert s(20) == pytest.approx(2e-5, abs=1e-15)
    assert s(200) == pytest.approx(0.0, abs=1e-15)
    assert s(10) == pytest.approx(1e-5, abs=1e-15)
    assert s(110) == pytest.approx(1e-5, abs=1e-15)


def test_schedule_without_warmup_starts_at_peak():
    s = LinearSchedule(1.0, 10, 0.0)
    assert s(0) == 1.0 and s(5) == 0.5 and s(10) == 0.0


def test_first_step_under_warmup_has_zero_lr():
    w = Tensor(np.ones((2, 2)))
    opt = _opt({"w": w}, warmup=0.1)
    assert opt.step({"w": np.ones((2, 2))}) == 0.0
    np.testing.assert_array_equal(w.data, 1.0)
