import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aidflow.aid import AlphaVector
from aidflow.errors import ContractError, DimensionError
from aidflow.gradcheck import gradcheck
from aidflow.objectives import (
    FlowSample,
    combine,
    diffusion_loss,
    dpo_loss,
    interpolate,
    reg_loss,
    score_from_velocity,
    total_loss,
)
from aidflow.optim import AdamW, adamw_update
from aidflow.selftest import GRADCHECK_MODEL, default_gradcheck, gradcheck_problem
from aidflow.tensor import Tensor


# ---------------------------------------------------------------------------
# losses


def test_equal_scores_give_log_two():
    out = dpo_loss(np.array([1.0, -2.0]), np.array([1.0, -2.0]), np.zeros(2), np.zeros(2), beta=0.1)
    assert float(out.data) == pytest.approx(math.log(2), abs=1e-12)


def test_dpo_matches_scalar_oracle():
    sw, sl, rw, rl, beta = 3.0, 1.0, 0.5, 0.25, 0.7
    expected = math.log1p(math.exp(-beta * ((sw - sl) - (rw - rl))))
    got = float(dpo_loss(np.array([sw]), np.array([sl]), np.array([rw]), np.array([rl]), beta).data)
    assert got == pytest.approx(expected, rel=1e-12)


def test_dpo_rejects_nonpositive_beta():
    with pytest.raises(ContractError):
        dpo_loss(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), beta=0.0)


def test_dpo_treats_reference_as_constant():
    sw = Tensor(np.array([0.3]), requires_grad=True)
    rw = Tensor(np.array([0.1]), requires_grad=True)
    dpo_loss(sw, np.array([0.0]), rw, np.array([0.0]), 0.5).backward()
    assert sw.grad is not None and rw.grad is None


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(0.01, 2.0))
def test_dpo_is_nonnegative_and_decreasing_in_margin(gap, beta):
    lo = float(dpo_loss(np.array([gap]), np.array([0.0]), np.zeros(1), np.zeros(1), beta).data)
    hi = float(dpo_loss(np.array([gap + 1.0]), np.array([0.0]), np.zeros(1), np.zeros(1), beta).data)
    assert lo >= 0 and hi <= lo


def test_perfect_velocity_gives_zero_diffusion_loss():
    r = np.random.default_rng(0)
    s = FlowSample(r.normal(size=(2, 3, 4)), r.normal(size=(2, 3, 4)), np.array([0.2, 0.9]))
    assert float(diffusion_loss(Tensor(s.eps - s.x), s).data) == 0.0


def test_diffusion_loss_is_entry_mean():
    v = Tensor(np.full((2, 3, 4), 2.0))
    assert float(diffusion_loss(v, np.zeros((2, 3, 4))).data) == pytest.approx(4.0)
    with pytest.raises(DimensionError):
        diffusion_loss(v, np.zeros((2, 3, 5)))


def test_interpolation_endpoints():
    x, eps = np.ones((2, 1, 1)), np.zeros((2, 1, 1))
    np.testing.assert_array_equal(interpolate(x, eps, np.array([0.0, 1.0])).ravel(), [1.0, 0.0])


def test_score_is_negative_per_sample_squared_error():
    v = Tensor(np.ones((2, 3, 2)))
    np.testing.assert_allclose(score_from_velocity(v, np.zeros((2, 3, 2))).data, [-6.0, -6.0])


def test_reg_loss_norm_oracle():
    assert float(reg_loss([np.array([0.3, 0.4])]).data) == pytest.approx(0.5, abs=1e-12)
    vecs = [AlphaVector(np.array([0.3, 0.4]), 0, 0.5), np.array([[0.0, 0.0], [1.0, 0.0]])]
    assert float(reg_loss(vecs).data) == pytest.approx((0.5 + 0.0 + 1.0) / 3, abs=1e-12)
    with pytest.raises(ContractError):
        reg_loss([])


def test_reg_loss_is_zero_at_zero_with_finite_gradient():
    a = Tensor(np.zeros((2, 4)), requires_grad=True)
    out = reg_loss([a])
    out.backward()
    assert float(out.data) == 0.0 and np.all(a.grad == 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_total_is_weighted_sum(d, p, r, ld, lr):
    b = total_loss(d, p, r, ld, lr)
    assert b.total == d + ld * p + lr * r == combine(d, p, r, ld, lr)


# ---------------------------------------------------------------------------
# optimizer


def test_two_steps_match_hand_unrolled_update():
    p0, g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.1]), np.array([-0.3, 0.2])
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.01
    p = Tensor(p0.copy(), requires_grad=True)
    opt = AdamW({"p": p}, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    expected = p0.copy()
    m = v = np.zeros(2)
    for k, g in enumerate([g1, g2], start=1):
        p.grad = g
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**k), v / (1 - b2**k)
        expected = expected - lr * (mh / (np.sqrt(vh) + eps) + wd * expected)
    np.testing.assert_allclose(p.data, expected, atol=1e-12, rtol=0)


def test_zero_gradient_leaves_parameter_without_decay():
    p = Tensor(np.array([1.5]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1)
    opt.step()
    assert p.data[0] == 1.5


def test_first_step_moves_by_learning_rate_in_gradient_sign():
    new, _, _ = adamw_update(np.zeros(3), np.array([5.0, -1e-3, 2.0]), np.zeros(3), np.zeros(3), 1, 0.01, 0.9, 0.999, 1e-12)
    np.testing.assert_allclose(new, [-0.01, 0.01, -0.01], rtol=1e-6)


def test_state_round_trip():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = AdamW({"p": p})
    p.grad = np.array([1.0, 1.0])
    opt.step()
    other = AdamW({"p": Tensor(np.zeros(2), requires_grad=True)})
    other.load_state(opt.step_count, opt.state_arrays())
    np.testing.assert_array_equal(other.m["p"], opt.m["p"])
    assert other.step_count == 1


# ---------------------------------------------------------------------------
# gradient check harness


def test_gradcheck_passes_on_quadratic():
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    report = gradcheck(lambda: (w * w).sum(), {"w": w})
    assert report.passed and report.max_rel_error < 1e-8
    assert "0 failure(s)" in report.format()


def test_gradcheck_restores_parameters():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    gradcheck(lambda: (w * w * w).sum(), {"w": w})
    np.testing.assert_array_equal(w.data, [1.0, 2.0])


def test_gradcheck_problem_covers_backbone_and_aid():
    _, params = gradcheck_problem(GRADCHECK_MODEL)
    assert any(k.startswith("aid.") for k in params) and any(k.startswith("blocks.") for k in params)


@pytest.mark.slow
def test_low_precision_gradcheck_passes():
    report = default_gradcheck("low")
    assert report.passed, report.format()
