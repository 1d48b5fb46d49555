import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freestyle.errors import ConfigError, DimensionError, PlanError
from freestyle.schedule import (add_noise, ddim_step, default_sigma, make_linear_schedule, make_timestep_plan,
                                predict_x0)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000, 1e-4, 0.02)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.19, 0.19)
    assert s.alphas[0] == pytest.approx(0.81)
    assert math.sqrt(s.alpha_bar(1)) == pytest.approx(0.9)


def test_two_step_product():
    s = make_linear_schedule(2, 0.1, 0.2)
    assert s.alpha_bar(2) == pytest.approx(0.72, abs=1e-15)


def test_alpha_bar_matches_high_precision_product(sched):
    mpmath.mp.dps = 50
    prod = mpmath.mpf(1)
    for t in range(1, 1001):
        beta = mpmath.mpf("1e-4") + (mpmath.mpf("0.02") - mpmath.mpf("1e-4")) * (t - 1) / 999
        prod *= 1 - beta
    assert abs(sched.alpha_bar(1000) / float(prod) - 1) < 1e-9


def test_schedule_invariants(sched):
    assert ((sched.betas > 0) & (sched.betas < 1)).all()
    assert (np.diff(sched.alpha_bars) < 0).all()
    np.testing.assert_allclose(sched.alpha_bars, np.cumprod(sched.alphas), atol=1e-6)
    assert 0 < sched.alpha_bar(1000) < sched.alpha_bar(1) < 1
    assert sched.alpha_bar(0) == 1.0


@pytest.mark.parametrize("bad", [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0)])
def test_schedule_bounds(bad):
    with pytest.raises(ConfigError):
        make_linear_schedule(10, *bad)


def test_add_noise_degenerate_cases(sched):
    x0 = torch.randn(2, 3, 4, 4)
    a, s = sched.coefs(400)
    assert torch.equal(add_noise(x0, 400, torch.zeros_like(x0), sched), a * x0)
    eps = torch.randn_like(x0)
    assert torch.equal(add_noise(torch.zeros_like(x0), 400, eps, sched), s * eps)


def test_add_noise_scalar_oracle(sched):
    g = torch.Generator().manual_seed(5)
    x0, eps = torch.randn(1, 3, 4, 4, generator=g), torch.randn(1, 3, 4, 4, generator=g)
    ab = float(np.prod(1 - np.linspace(1e-4, 0.02, 1000)[:500]))
    out = add_noise(x0, 500, eps, sched)
    for v, a, e in zip(out.flatten().tolist(), x0.flatten().tolist(), eps.flatten().tolist()):
        assert v == pytest.approx(math.sqrt(ab) * a + math.sqrt(1 - ab) * e, abs=1e-6)


def test_shape_mismatch(sched):
    with pytest.raises(DimensionError):
        add_noise(torch.zeros(1, 3, 4, 4), 3, torch.zeros(1, 3, 4, 5), sched)


@pytest.mark.parametrize("t", [1, 10, 250, 500, 958, 1000])
def test_predict_x0_inverts_add_noise(sched, t):
    g = torch.Generator().manual_seed(t)
    x0, eps = torch.rand(2, 3, 8, 8, generator=g) * 2 - 1, torch.randn(2, 3, 8, 8, generator=g)
    assert (predict_x0(add_noise(x0, t, eps, sched), eps, t, sched) - x0).abs().max() < 1e-4


def test_predict_x0_oracle_and_zero_eps(sched):
    g = torch.Generator().manual_seed(1)
    xt, e = torch.randn(1, 3, 4, 4, generator=g), torch.randn(1, 3, 4, 4, generator=g)
    ab = float(np.prod(1 - np.linspace(1e-4, 0.02, 1000)[:958]))
    ref = (xt.double() - math.sqrt(1 - ab) * e.double()) / math.sqrt(ab)
    assert torch.allclose(predict_x0(xt, e, 958, sched).double(), ref, rtol=1e-5, atol=1e-5)
    assert torch.allclose(predict_x0(xt, torch.zeros_like(xt), 958, sched), xt / math.sqrt(ab))


def test_ddim_final_step_returns_x0(sched):
    x0, eps = torch.rand(1, 3, 8, 8) * 2 - 1, torch.randn(1, 3, 8, 8)
    assert (ddim_step(add_noise(x0, 40, eps, sched), eps, 40, 0, sched) - x0).abs().max() < 1e-4


@pytest.mark.parametrize("t,tp", [(958, 926), (500, 100), (30, 1), (1000, 999)])
def test_ddim_step_moves_along_forward_process(sched, t, tp):
    x0, eps = torch.rand(1, 3, 8, 8) * 2 - 1, torch.randn(1, 3, 8, 8)
    assert (ddim_step(add_noise(x0, t, eps, sched), eps, t, tp, sched) - add_noise(x0, tp, eps, sched)).abs().max() < 1e-4


def test_ddim_zero_eps(sched):
    xt = torch.randn(1, 3, 4, 4)
    ratio = math.sqrt(sched.alpha_bar(300) / sched.alpha_bar(600))
    assert torch.allclose(ddim_step(xt, torch.zeros_like(xt), 600, 300, sched), ratio * xt, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 1000), st.data())
def test_ddim_clip_matches_plain_when_in_range(t, data):
    tp = data.draw(st.integers(0, t - 1))
    sched = make_linear_schedule()
    g = torch.Generator().manual_seed(t)
    x0, eps = torch.rand(2, 3, 4, 4, generator=g) * 2 - 1, torch.randn(2, 3, 4, 4, generator=g)
    xt = add_noise(x0, t, eps, sched)
    assert torch.allclose(ddim_step(xt, eps, t, tp, sched, clip_x0=True), ddim_step(xt, eps, t, tp, sched),
                          atol=1e-4)


def test_ddim_clip_bounds_prediction(sched):
    xt = torch.randn(1, 3, 8, 8)
    # a zero noise estimate at t=958 implies an x0 far outside the image range
    assert ddim_step(xt, torch.zeros_like(xt), 958, 0, sched).abs().max() > 10
    out = ddim_step(xt, torch.zeros_like(xt), 958, 0, sched, clip_x0=True)
    assert torch.equal(out, (xt / math.sqrt(sched.alpha_bar(958))).clamp(-1, 1))
    mid = ddim_step(xt, torch.zeros_like(xt), 958, 500, sched, clip_x0=True)
    a, s = sched.coefs(958)
    x0c = (xt / a).clamp(-1, 1)
    ref = sched.coefs(500)[0] * x0c + sched.coefs(500)[1] * (xt - a * x0c) / s
    assert torch.allclose(mid, ref, atol=1e-6)


def test_ddim_rejects_bad_order(sched):
    with pytest.raises(PlanError):
        ddim_step(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), 10, 10, sched)


def test_plan_examples():
    plan = make_timestep_plan(958, 30, 1000)
    assert len(plan) == 30 and plan.steps[0] == 958
    assert all(a > b for a, b in zip(plan.steps, plan.steps[1:]))
    assert make_timestep_plan(3, 3, 1000).steps == (3, 2, 1)
    assert plan.transitions()[-1][1] == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1000).flatmap(lambda s: st.tuples(st.just(s), st.integers(1, s))))
def test_plan_property(args):
    sigma, n = args
    steps = make_timestep_plan(sigma, n, 1000).steps
    assert len(steps) == n and steps[0] == sigma
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert all(1 <= s <= 1000 for s in steps)


@pytest.mark.parametrize("sigma,n", [(5, 6), (0, 1), (1001, 3), (10, 0)])
def test_plan_errors(sigma, n):
    with pytest.raises(PlanError):
        make_timestep_plan(sigma, n, 1000)


def test_default_sigma_scales_with_T():
    assert default_sigma(1000) == 958
    assert default_sigma(200) == 192


def test_chained_ddim_with_oracle_eps_reconstructs(sched):
    from freestyle.pipeline import oracle_reconstruction
    x0, eps = torch.rand(4, 3, 16, 16) * 2 - 1, torch.randn(4, 3, 16, 16)
    out = oracle_reconstruction(x0, eps, default_sigma(1000), 30, sched)
    assert (out - x0).abs().max() < 1e-3
