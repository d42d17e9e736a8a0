import json
import math

import numpy as np
import pytest

from normec.algorithms import AlgoConfig, GradAtX0Perturbed, corollary1_schedule, initial_state, realized_residual, run, theorem1_step_size
from normec.oracle import (
    check_corollary1_bound,
    check_noise_accumulation,
    check_theorem1_bound,
    check_theorem2_bound,
    corollary1_constant,
    noise_accumulation_bound,
    scalar_memory_normalize,
    theorem1_rhs,
    theorem2_rhs,
    track_memory_clip,
    track_memory_normalize,
)
from normec.problems import make_counterexample, make_random_quadratic


def test_normalize_tracking_fixed_point():
    rep = track_memory_normalize([1.0, 2.0], [1.0, 2.0], 0.5, 0.3, 20)
    assert rep.residuals == [0.0] * 21 and rep.passed


def test_normalize_tracking_matches_scalar_script():
    rep = track_memory_normalize([0.0], [1.0], 1.0, 0.5, 50)
    ref = scalar_memory_normalize(0.0, 1.0, 1.0, 0.5, 50)
    assert rep.passed
    assert rep.residuals[:3] == pytest.approx([1.0, 0.75, 0.75 * (1 - 0.5 / 1.75)], rel=1e-15)
    assert np.allclose(rep.residuals, ref, rtol=1e-14, atol=0)


def test_normalize_tracking_long_run_converges():
    rep = track_memory_normalize([0.0, 0.0], [3.0, -4.0], 1.0, 0.5, 10_000)
    assert rep.residuals[-1] < 1e-6


@pytest.mark.parametrize("d", [1, 5, 50])
def test_normalize_tracking_random(d):
    rng = np.random.default_rng(d)
    for _ in range(5):
        rep = track_memory_normalize(rng.standard_normal(d), rng.standard_normal(d) * 4, 5.0, 0.05, 1000)
        assert rep.passed and rep.max_rel_deviation <= 1e-12


def test_normalize_tracking_flags_precondition():
    rep = track_memory_normalize([0.0], [1.0], 0.1, 5.0, 10)
    assert rep.precondition_ok is False and rep.passed is None


def test_clip_tracking_examples():
    rep = track_memory_clip([0.0], [5.0], 1.0, 7)
    assert rep.residuals == [5.0, 4.0, 3.0, 2.0, 1.0, 0.0, 0.0, 0.0] and rep.passed
    one = track_memory_clip([1.0, 1.0], [2.0, 3.0], 10.0, 3)
    assert one.residuals[1] == 0.0 and one.passed
    fixed = track_memory_clip([1.0], [1.0], 0.5, 4)
    assert fixed.residuals == [0.0] * 5 and fixed.passed


@pytest.mark.parametrize("d", [1, 5, 50])
def test_clip_tracking_random(d):
    rng = np.random.default_rng(100 + d)
    g0, gs = rng.standard_normal(d) * 5, rng.standard_normal(d) * 5
    tau = 0.3
    rep = track_memory_clip(g0, gs, tau, math.ceil(np.linalg.norm(g0 - gs) / tau) + 3)
    assert rep.passed
    assert len(rep.residuals) == len(rep.predicted)


def _conforming(problem, K, r=0.5, alpha=0.5, frac=0.5, seed=0):
    cfg = AlgoConfig(gamma=1.0, alpha=alpha, K=K, init_policy=GradAtX0Perturbed(r), seed=seed, x0=tuple(np.full(problem.d, 2.0)))
    R = realized_residual(problem, initial_state(problem, cfg))
    beta = frac * (alpha + R)
    return cfg.with_(beta=beta, gamma=theorem1_step_size(problem, R, alpha, beta))


def test_theorem1_k0_degenerate():
    p = make_random_quadratic(3, 4, 1.0, seed=0)
    cfg = _conforming(p, K=0)
    trace = run(p, cfg)
    rep = check_theorem1_bound(trace, p, cfg)
    gap = p.loss(np.full(4, 2.0)) - p.f_inf
    assert rep.rhs == pytest.approx(gap / cfg.gamma + 2 * trace.realized_R + p.L * cfg.gamma / 2, rel=1e-14)
    assert rep.lhs == pytest.approx(np.linalg.norm(p.grad(np.full(4, 2.0))), rel=1e-14)
    assert rep.passed


def test_theorem1_small_residual_long_run():
    p = make_random_quadratic(4, 6, 2.0, seed=1)
    cfg = _conforming(p, K=5000, r=1e-3, alpha=0.1)
    trace = run(p, cfg)
    rep = check_theorem1_bound(trace, p, cfg)
    assert rep.passed and not trace.residual_violations
    terms = theorem1_rhs(p, trace.initial_loss - p.f_inf, trace.realized_R, cfg.gamma, 5000)
    assert rep.rhs == terms["total"]
    assert json.loads(rep.to_json())["passed"] is True


def test_theorem1_zero_residual_is_inapplicable():
    p = make_counterexample()
    cfg = AlgoConfig(gamma=0.1, alpha=0.5, beta=0.1, K=10, x0=(0.0,))
    trace = run(p, cfg.with_(x0=(3.0,)), "normec")
    trace.realized_R = 0.0
    rep = check_theorem1_bound(trace, p, cfg)
    assert not rep.applicable and rep.passed is None and "R = 0" in rep.note


def test_theorem1_refuses_nonconforming_or_private():
    p = make_random_quadratic(3, 4, 1.0, seed=0)
    cfg = _conforming(p, K=10)
    trace = run(p, cfg)
    assert not check_theorem1_bound(trace, p, cfg.with_(gamma=cfg.gamma * 2)).applicable
    assert not check_theorem1_bound(trace, p, cfg.with_(sigma_dp=1.0)).applicable
    assert not check_theorem1_bound(trace, p, cfg.with_(server_normalization=False)).applicable


def test_corollary1_schedule_meets_constant():
    p = make_random_quadratic(4, 5, 1.0, seed=3)
    K, D, alpha, beta = 2000, 1.0, 1.0, 0.5
    R, gamma = corollary1_schedule(p, D, alpha, beta, K)
    cfg = AlgoConfig(gamma=gamma, alpha=alpha, beta=beta, K=K, init_policy=GradAtX0Perturbed(R), x0=tuple(np.full(5, 2.0)))
    trace = run(p, cfg)
    rep = check_corollary1_bound(trace, p, cfg, D)
    gap = trace.initial_loss - p.f_inf
    C = p.L_max * (alpha + D) * gap / (beta * D) + 2 * D + 0.5 * p.L * beta * D / (p.L_max * (alpha + D))
    assert corollary1_constant(p, gap, D, alpha, beta) == pytest.approx(C, rel=1e-14)
    assert rep.rhs == pytest.approx(C / math.sqrt(K + 1), rel=1e-14)
    assert rep.passed


def test_theorem2_needs_enough_traces():
    p = make_random_quadratic(4, 8, 1.0, seed=0)
    cfg = _conforming(p, K=20).with_(sigma_dp=1.0)
    traces = [run(p, cfg.with_(seed=s)) for s in range(10)]
    rep = check_theorem2_bound(traces, p, cfg)
    assert not rep.applicable and rep.passed is None


def test_theorem2_terms():
    p = make_random_quadratic(4, 8, 1.0, seed=0)
    cfg = _conforming(p, K=20).with_(sigma_dp=1.5)
    full = theorem2_rhs(p, cfg, 3.0, 0.5, 20)
    half = theorem2_rhs(p, cfg.with_(beta=cfg.beta / 2), 3.0, 0.5, 20)
    assert half["noise"] == pytest.approx(full["noise"] / 2, rel=1e-14)
    quiet = theorem2_rhs(p, cfg.with_(sigma_dp=0.0), 3.0, 0.5, 20)
    assert quiet["total"] == pytest.approx(theorem1_rhs(p, 3.0, 0.5, cfg.gamma, 20)["total"], rel=1e-15)
    assert full["noise"] == pytest.approx(2 * math.sqrt(cfg.beta**2 * 21 * 8 * 1.5**2), rel=1e-14)


def test_theorem2_bound_holds_on_batch():
    p = make_random_quadratic(4, 8, 1.0, seed=1)
    cfg = _conforming(p, K=100).with_(sigma_dp=1.0)
    traces = [run(p, cfg.with_(seed=s)) for s in range(30)]
    rep = check_theorem2_bound(traces, p, cfg)
    assert rep.applicable and rep.passed
    assert "expectation" in rep.note


def test_noise_accumulation_without_noise_is_exact():
    p = make_random_quadratic(4, 8, 1.0, seed=2)
    cfg = AlgoConfig(gamma=0.05, alpha=1.0, beta=0.5, K=50)
    rep = check_noise_accumulation(p, cfg, range(2))
    assert rep.passed and rep.lhs <= 1e-10


def test_noise_accumulation_bound_needs_total_variance():
    # The averaged-noise bound is stated for E||z_i||^2 = sigma^2.  With
    # per-coordinate noise of std sigma the realized error is about sqrt(d)
    # times larger than the bound evaluated with sigma^2 alone.
    p = make_random_quadratic(4, 8, 1.0, seed=2)
    cfg = AlgoConfig(gamma=0.05, alpha=1.0, beta=0.5, K=50, sigma_dp=1.0)
    rep = check_noise_accumulation(p, cfg, range(60))
    assert rep.passed
    literal = math.sqrt(cfg.beta**2 * (cfg.K + 1) * cfg.sigma_dp**2 / p.n)
    assert rep.terms["max_mean"] > 2 * literal
    vector = check_noise_accumulation(p, cfg.with_(noise_convention="vector"), range(60))
    assert vector.passed
    assert vector.rhs == pytest.approx(literal, rel=1e-15)
    assert noise_accumulation_bound(cfg, 4, 8) == pytest.approx(literal * math.sqrt(8), rel=1e-14)
