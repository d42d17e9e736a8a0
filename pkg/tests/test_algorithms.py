import math

import numpy as np
import pytest

from normec.algorithms import (
    CSV_COLUMNS,
    AlgoConfig,
    DivergenceError,
    GradAtX0Perturbed,
    NoiseSource,
    RunState,
    corollary1_schedule,
    dpsgd_round,
    ef21_round,
    initial_state,
    is_conforming,
    noise_second_moment,
    normec_round,
    realized_residual,
    run,
    run_safely,
    theorem1_step_size,
)
from normec.operators import Clip, SmoothedNormalize, StandardNormalize, TopK
from normec.oracle import scalar_dpsgd, scalar_normalize, scalar_normec
from normec.problems import QuadraticProblem, make_counterexample, make_random_quadratic

EX1_GRADS = [lambda x: x - 3.0, lambda x: x + 3.0]


def test_config_validation():
    for bad in (dict(gamma=0.0), dict(gamma=1.0, beta=0.0), dict(gamma=1.0, alpha=-1.0), dict(gamma=1.0, tau=0.0),
                dict(gamma=1.0, sigma_dp=-1.0), dict(gamma=1.0, noise_convention="x"), dict(gamma=1.0, K=-1)):
        with pytest.raises(ValueError):
            AlgoConfig(**bad)
    with pytest.raises(ValueError):
        GradAtX0Perturbed(0.0)


def test_example1_first_round_matches_hand_simulation():
    p = make_counterexample()
    R = 5.0
    gamma = theorem1_step_size(p, R, 0.5, 0.5)
    cfg = AlgoConfig(gamma=gamma, alpha=0.5, beta=0.5, K=1, x0=(2.0,))
    state, _ = normec_round(initial_state(p, cfg), p, cfg)
    assert state.g_clients[0, 0] == pytest.approx(0.5 * scalar_normalize(-1.0, 0.5), rel=1e-15)
    assert state.g_clients[1, 0] == pytest.approx(0.5 * scalar_normalize(5.0, 0.5), rel=1e-15)
    assert state.g_clients[0, 0] == pytest.approx(-1 / 3, rel=1e-15)
    assert state.g_clients[1, 0] == pytest.approx(5 / 11, rel=1e-15)
    xs, _, _ = scalar_normec(EX1_GRADS, 2.0, [0.0, 0.0], 0.5, 0.5, gamma, 1)
    assert state.x[0] == pytest.approx(xs[1], rel=1e-15)


def test_normec_matches_scalar_reference_over_many_rounds():
    p = make_counterexample()
    cfg = AlgoConfig(gamma=0.05, alpha=0.5, beta=0.25, K=300, x0=(2.0,))
    trace = run(p, cfg)
    xs, g, _ = scalar_normec(EX1_GRADS, 2.0, [0.0, 0.0], 0.5, 0.25, 0.05, 300)
    assert trace.final_state.x[0] == pytest.approx(xs[-1], abs=1e-12)
    assert np.allclose(trace.final_state.g_clients[:, 0], g, atol=1e-12)


def test_zero_residual_init_gives_exact_gradient_step():
    p = QuadraticProblem(np.array([[[2.0, 0.0], [0.0, 1.0]]]), np.array([[1.0, -1.0]]))
    x0 = np.array([3.0, 2.0])
    g0 = p.client_grads(x0)
    state = RunState(x=x0, g_hat=g0[0].copy(), g_clients=g0.copy())
    cfg = AlgoConfig(gamma=0.1, alpha=0.3, beta=0.7, K=1, server_normalization=False)
    new, _ = normec_round(state, p, cfg)
    assert np.array_equal(new.g_hat, g0[0])
    assert np.array_equal(new.x, x0 - 0.1 * g0[0])


def test_zero_estimator_leaves_x_unchanged():
    p = make_counterexample()
    cfg = AlgoConfig(gamma=0.3, alpha=0.0, beta=0.5, K=1, x0=(2.0,))
    new, _ = normec_round(initial_state(p, cfg), p, cfg)
    assert np.all(new.g_hat == 0.0)
    assert new.x[0] == 2.0


def test_ef21_with_smoothed_normalize_equals_normec_without_server_norm():
    p = make_random_quadratic(3, 4, 2.0, seed=1)
    cfg = AlgoConfig(gamma=0.05, alpha=0.2, beta=0.3, K=50, server_normalization=False)
    s1 = s2 = initial_state(p, cfg)
    for _ in range(50):
        s1, _ = normec_round(s1, p, cfg)
        s2, _ = ef21_round(s2, p, cfg, SmoothedNormalize(0.2))
    assert s1.x.tobytes() == s2.x.tobytes()
    assert s1.g_clients.tobytes() == s2.g_clients.tobytes()


def test_inactive_clip21_is_gradient_descent():
    p = make_counterexample()
    x0 = np.array([2.0])
    g0 = p.client_grads(x0)
    state = RunState(x=x0, g_hat=g0.mean(axis=0), g_clients=g0.copy())
    gamma = 0.1
    cfg = AlgoConfig(gamma=gamma, beta=1.0, tau=5.0, K=10)
    x = 2.0
    for _ in range(10):
        state, _ = ef21_round(state, p, cfg, Clip(5.0))
        x = x - gamma * x  # f'(x) = x
        assert state.x[0] == pytest.approx(x, rel=1e-14)


def test_memoryless_top1_stalls_away_from_minimizer():
    # At x = 0 the client gradients (2, 1) and (-2, 1) compress to (2, 0) and
    # (-2, 0); their mean is zero although grad f(0) = (0, 1).
    p = QuadraticProblem(np.stack([np.eye(2)] * 2), np.array([[-2.0, -1.0], [2.0, -1.0]]))
    assert np.allclose(p.x_star, [0.0, -1.0])
    cfg = AlgoConfig(gamma=0.1, K=500, x0=(0.0, 0.0))
    state = initial_state(p, cfg)
    for _ in range(500):
        state, metrics = dpsgd_round(state, p, cfg, TopK(1))
    assert np.array_equal(state.x, [0.0, 0.0])
    assert metrics.grad_norm == 1.0
    ef = run(p, cfg.with_(beta=1.0), "ef21-topk")
    assert np.linalg.norm(ef.final_state.x - p.x_star) < 1e-6


def test_dpsgd_examples():
    p = make_counterexample()
    state = initial_state(p, AlgoConfig(gamma=1.0, x0=(2.0,)))
    gamma = 0.2
    cfg = AlgoConfig(gamma=gamma, x0=(2.0,))
    new, _ = dpsgd_round(state, p, cfg, StandardNormalize())
    assert new.x[0] == 2.0
    new, _ = dpsgd_round(state, p, cfg, Clip(5.0))
    assert new.x[0] == pytest.approx(2.0 - 2.0 * gamma, rel=1e-15)
    new, _ = dpsgd_round(state, p, cfg, SmoothedNormalize(1.0))
    want = scalar_dpsgd(EX1_GRADS, 2.0, lambda g: scalar_normalize(g, 1.0), gamma, 1)[1]
    assert new.x[0] == pytest.approx(want, rel=1e-15)
    assert want == pytest.approx(2.0 - gamma * (-0.5 + 5 / 6) / 2, rel=1e-15)


def test_k1_run_equals_one_round():
    p = make_random_quadratic(3, 3, 1.0, seed=0)
    cfg = AlgoConfig(gamma=0.1, alpha=0.5, beta=0.2, K=1, sigma_dp=0.3, seed=4)
    trace = run(p, cfg)
    state, metrics = normec_round(initial_state(p, cfg), p, cfg, NoiseSource.from_config(cfg))
    assert len(trace.rows) == 2
    assert trace.final_state.x.tobytes() == state.x.tobytes()
    assert trace.rows[0].grad_norm == metrics.grad_norm


@pytest.mark.parametrize("algo", ["normec", "dp-clip21", "dpsgd-clip", "dpsgd-norm"])
def test_identical_seeds_identical_traces(algo):
    p = make_random_quadratic(4, 5, 2.0, seed=2)
    cfg = AlgoConfig(gamma=0.05, alpha=0.5, beta=0.2, tau=1.0, K=100, sigma_dp=0.5, seed=9)
    a, b = run(p, cfg, algo), run(p, cfg, algo)
    assert a.to_csv() == b.to_csv()
    c = run(p, cfg.with_(seed=10), algo)
    assert c.to_csv() != a.to_csv()


def test_noise_streams_independent_of_evaluation_order():
    src = NoiseSource(3, 1.0)
    together = src.clients(5, 4, 6)
    alone = np.stack([src.client(5, i, 6) for i in reversed(range(4))])[::-1]
    assert np.array_equal(together, alone)


def test_noise_conventions():
    cfg = AlgoConfig(gamma=1.0, sigma_dp=2.0)
    assert noise_second_moment(cfg, 9) == 36.0
    assert noise_second_moment(cfg.with_(noise_convention="vector"), 9) == 4.0
    draws = np.stack([NoiseSource(s, 2.0, "vector").client(0, 0, 9) for s in range(4000)])
    assert np.mean(np.sum(draws**2, axis=1)) == pytest.approx(4.0, rel=0.05)


def test_memory_uses_noiseless_update():
    p = make_random_quadratic(3, 4, 1.0, seed=5)
    cfg = AlgoConfig(gamma=0.1, alpha=0.5, beta=0.3, K=1)
    state = initial_state(p, cfg)
    clean, _ = normec_round(state, p, cfg)
    noisy_cfg = cfg.with_(sigma_dp=3.0)
    noisy, m = normec_round(state, p, noisy_cfg, NoiseSource.from_config(noisy_cfg))
    assert np.array_equal(clean.g_clients, noisy.g_clients)
    assert m.consensus_error > 0


def test_server_estimator_tracks_client_mean_without_noise():
    p = make_random_quadratic(5, 6, 3.0, seed=8)
    cfg = AlgoConfig(gamma=0.02, alpha=0.1, beta=0.5, K=300, init_policy=GradAtX0Perturbed(1.0))
    trace = run(p, cfg)
    assert max(r.consensus_error for r in trace.rows[:-1]) <= 1e-10
    assert max(r.max_delta_norm for r in trace.rows[:-1]) <= 1.0


def test_perturbed_init_realizes_target_residual():
    p = make_random_quadratic(4, 7, 1.0, seed=3)
    for r in (1e-3, 0.5, 20.0):
        cfg = AlgoConfig(gamma=1.0, init_policy=GradAtX0Perturbed(r), seed=2)
        assert realized_residual(p, initial_state(p, cfg)) == pytest.approx(r, rel=1e-9)


def test_step_size_helpers():
    p = make_counterexample()
    assert theorem1_step_size(p, 5.0, 0.5, 0.25) == pytest.approx(0.25 * 5 / 5.5)
    with pytest.raises(ValueError):
        theorem1_step_size(p, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        theorem1_step_size(p, 0.0, 1.0, 0.1)
    R, gamma = corollary1_schedule(p, 2.0, 1.0, 0.5, 99)
    assert R == pytest.approx(0.2) and gamma == pytest.approx(0.5 * 2 / (3 * 10))
    with pytest.raises(ValueError):
        corollary1_schedule(p, 2.0, 0.5, 0.5, 10)
    cfg = AlgoConfig(gamma=0.2, alpha=0.5, beta=0.25)
    assert is_conforming(p, cfg, 5.0)
    assert not is_conforming(p, cfg.with_(gamma=0.3), 5.0)
    assert not is_conforming(p, cfg.with_(server_normalization=False), 5.0)


@pytest.mark.parametrize("seed", range(6))
def test_residual_invariant_in_conforming_runs(seed):
    p = make_random_quadratic(5, 8, 4.0, seed=seed)
    for policy, alpha in ((GradAtX0Perturbed(0.3), 0.1), (GradAtX0Perturbed(2.0), 1.0)):
        cfg = AlgoConfig(gamma=1.0, alpha=alpha, K=400, init_policy=policy, seed=seed, x0=tuple(np.full(8, 3.0)))
        R = realized_residual(p, initial_state(p, cfg))
        beta = 0.9 * (alpha + R)
        cfg = cfg.with_(beta=beta, gamma=theorem1_step_size(p, R, alpha, beta))
        for sigma in (0.0, 2.0):
            trace = run(p, cfg.with_(sigma_dp=sigma))
            assert trace.conforming
            assert trace.residual_violations == []
            assert max(r.max_residual for r in trace.rows) <= R * (1 + 1e-9)


def test_divergence_is_reported_with_trace():
    p = make_random_quadratic(2, 3, 1.0, seed=0)
    cfg = AlgoConfig(gamma=50.0, tau=1e9, K=200, x0=(1.0, 1.0, 1.0))
    with pytest.raises(DivergenceError) as info:
        run(p, cfg, "dpsgd-clip")
    err = info.value
    assert err.trace is not None and err.trace.diverged
    assert err.round == err.trace.diverged_round
    assert len(err.trace.rows) == err.round
    safe = run_safely(p, cfg, "dpsgd-clip")
    assert safe.diverged and safe.summary()["diverged_round"] == err.round


def test_unknown_algorithm_and_missing_tau():
    p = make_counterexample()
    with pytest.raises(ValueError, match="unknown algorithm"):
        run(p, AlgoConfig(gamma=0.1, K=1), "sgd")
    with pytest.raises(ValueError, match="tau"):
        run(p, AlgoConfig(gamma=0.1, K=1), "clip21")


def test_csv_layout(tmp_path):
    p = make_counterexample()
    trace = run(p, AlgoConfig(gamma=0.1, alpha=0.5, beta=0.2, K=10, x0=(2.0,)))
    path = tmp_path / "t.csv"
    trace.write_csv(path, thin=3)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert [int(line.split(",")[0]) for line in lines[1:]] == [0, 3, 6, 9, 10]
    assert float(lines[1].split(",")[2]) == 2.0
    with pytest.raises(ValueError):
        trace.to_csv(thin=0)


def test_timing_is_opt_in():
    p = make_counterexample()
    cfg = AlgoConfig(gamma=0.1, K=5, x0=(2.0,))
    assert all(r.wallclock_ms == 0.0 for r in run(p, cfg).rows)
    timed = run(p, cfg, record_timing=True)
    assert all(r.wallclock_ms > 0.0 for r in timed.rows[:-1])
    assert math.isfinite(timed.min_grad_norm)
