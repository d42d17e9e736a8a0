"""The acceptance checks as callable functions.

Each ``check_*`` returns a ``CheckResult``; ``run_all`` executes them in order.
The ``verify`` CLI command and the acceptance tests both use these, with the
tolerances and problem sizes fixed below.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from normec.algorithms import AlgoConfig, initial_state, realized_residual, run, theorem1_step_size
from normec.harness import ExperimentConfig, run_experiment
from normec.operators import row_norms, smoothed_normalize_rows
from normec.oracle import (
    check_noise_accumulation,
    check_theorem1_bound,
    check_theorem2_bound,
    scalar_dpsgd,
    scalar_normalize,
    theorem1_suite,
    track_memory_clip,
    track_memory_normalize,
)
from normec.privacy import DpBudget, calibrate_sigma
from normec.problems import make_counterexample, make_random_quadratic

IDENTITY_RTOL = 1e-12
# Absolute allowance for the rounding of g - beta*N(g) when beta is close to
# alpha + ||g|| and the two terms cancel.
IDENTITY_ABS = 1e-15
STEP_GRID = (0.001, 0.01, 0.1, 1.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: float | None = None

    @property
    def within_budget(self) -> bool:
        return self.budget is None or self.seconds <= self.budget

    def line(self) -> str:
        status = "PASS" if self.passed and self.within_budget else "FAIL"
        budget = f" (budget {self.budget:g}s)" if self.budget is not None else ""
        return f"{status} {self.name}: {self.detail} [{self.seconds:.2f}s{budget}]"


def _timed(name: str, budget: float | None, func) -> CheckResult:
    start = time.perf_counter()
    passed, detail = func()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start, budget)


# 1 ---------------------------------------------------------------------------


def lemma1_identity(count: int = 10_000, seed: int = 0, d: int = 5):
    rng = np.random.default_rng(seed)
    mag = 10.0 ** rng.uniform(-12, 12, size=count)
    G = rng.standard_normal((count, d))
    G *= (mag / np.linalg.norm(G, axis=1))[:, None]
    alpha = 10.0 ** rng.uniform(-12, 12, size=count)
    beta = 10.0 ** rng.uniform(-12, 12, size=count)
    worst_rel, worst_norm, failures = 0.0, 0.0, 0
    for j in range(count):
        g = G[j : j + 1]
        N = smoothed_normalize_rows(g, alpha[j])
        norm_N = float(row_norms(N)[0])
        worst_norm = max(worst_norm, norm_N)
        lhs = float(np.sum((g - beta[j] * N) ** 2))
        ng = float(np.linalg.norm(g))
        rhs = (1.0 - beta[j] / (alpha[j] + ng)) ** 2 * ng**2
        scale = max(ng, beta[j] * norm_N) ** 2
        err = abs(lhs - rhs)
        rel = err / rhs if rhs > 0 else (0.0 if err == 0 else math.inf)
        worst_rel = max(worst_rel, rel if err > IDENTITY_ABS * scale else 0.0)
        if err > IDENTITY_RTOL * rhs + IDENTITY_ABS * scale or norm_N > 1.0:
            failures += 1
    return failures == 0, f"{count} triples, {failures} failures, worst rel err {worst_rel:.2e}, max ||N|| {worst_norm!r}"


def check_lemma1(count: int = 10_000) -> CheckResult:
    return _timed("lemma1-identity", 1.0, lambda: lemma1_identity(count))


# 2 ---------------------------------------------------------------------------


def example1_stall(K_stall: int = 1000, K_normec: int = 2000):
    problem = make_counterexample()
    stall = run(problem, AlgoConfig(gamma=0.1, alpha=0.0, K=K_stall, x0=(2.0,)), "dpsgd-norm")
    xs_ref = scalar_dpsgd([lambda x: x - 3.0, lambda x: x + 3.0], 2.0, lambda g: scalar_normalize(g, 0.0), 0.1, K_stall)
    stalled = stall.final_state.x[0] == 2.0 and all(x == 2.0 for x in xs_ref)
    stalled = stalled and all(r.grad_norm == 2.0 for r in stall.rows)
    cfg = AlgoConfig(gamma=1.0, alpha=0.5, beta=0.25, K=K_normec, x0=(2.0,))
    R = realized_residual(problem, initial_state(problem, cfg))
    cfg = cfg.with_(gamma=0.5 * theorem1_step_size(problem, R, cfg.alpha, cfg.beta))
    ok = run(problem, cfg, "normec")
    x_final = abs(float(ok.final_state.x[0]))
    passed = stalled and x_final < 0.1 and not ok.residual_violations
    return passed, f"dpsgd-norm stays at 2.0: {stalled}; normec |x^K| = {x_final:.4g} (gamma={cfg.gamma:.4g})"


def check_example1() -> CheckResult:
    return _timed("example1-stall", 1.0, example1_stall)


# 3 ---------------------------------------------------------------------------


def memory_recursions(steps: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    norm_ok, worst = True, 0.0
    for d in (1, 5, 50):
        for _ in range(5):
            g0, gs = rng.standard_normal(d) * 3, rng.standard_normal(d) * 3
            rep = track_memory_normalize(g0, gs, alpha=10.0, beta=0.01, steps=steps)
            norm_ok &= bool(rep.passed)
            worst = max(worst, rep.max_rel_deviation)
    clip_ok = True
    for d in (1, 5, 50):
        for tau in (0.1, 1.0, 7.0):
            g0, gs = rng.standard_normal(d) * 5, rng.standard_normal(d) * 5
            steps_needed = math.ceil(np.linalg.norm(g0 - gs) / tau)
            rep = track_memory_clip(g0, gs, tau, steps=steps_needed + 5, atol=1e-10)
            clip_ok &= bool(rep.passed)
    exact = track_memory_clip([0.0], [5.0], 1.0, 6).residuals == [5.0, 4.0, 3.0, 2.0, 1.0, 0.0, 0.0]
    return norm_ok and clip_ok and exact, f"normalize worst rel dev {worst:.2e}; clip exact decrease and arrival {clip_ok and exact}"


def check_memory() -> CheckResult:
    return _timed("memory-recursions", 1.0, memory_recursions)


# 4, 5 ------------------------------------------------------------------------


def theorem1_and_lemma2(count: int = 20, K: int = 5000, dp_K: int = 200):
    suite = theorem1_suite(count, K)
    bound_fail, violations, margins = 0, 0, []
    for problem, cfg in suite:
        trace = run(problem, cfg, "normec")
        rep = check_theorem1_bound(trace, problem, cfg)
        bound_fail += not (rep.applicable and rep.passed)
        violations += len(trace.residual_violations) + (not trace.conforming)
        margins.append(rep.margin)
    dp_violations = 0
    for problem, cfg in suite:
        trace = run(problem, cfg.with_(K=dp_K, sigma_dp=1.0), "normec")
        dp_violations += len(trace.residual_violations) + (not trace.conforming)
    detail = (
        f"bound held in {count - bound_fail}/{count} runs (min margin {min(margins):.3g}); "
        f"residual violations {violations} noiseless, {dp_violations} private"
    )
    return (bound_fail == 0, violations + dp_violations == 0), detail


def check_theorem1() -> list[CheckResult]:
    start = time.perf_counter()
    (bound_ok, lemma2_ok), detail = theorem1_and_lemma2()
    elapsed = time.perf_counter() - start
    return [
        CheckResult("theorem1-suite", bound_ok, detail, elapsed, 30.0),
        CheckResult("lemma2-residual", lemma2_ok, detail, elapsed, None),
    ]


# 6 ---------------------------------------------------------------------------


def lemma3(seeds: int = 200, sigma: float = 1.0):
    problem = make_random_quadratic(4, 8, 1.0, seed=7)
    cfg = AlgoConfig(gamma=0.05, alpha=1.0, beta=0.5, K=50, sigma_dp=sigma)
    noisy = check_noise_accumulation(problem, cfg, range(seeds))
    clean = check_noise_accumulation(problem, cfg.with_(sigma_dp=0.0), range(3))
    detail = (
        f"max mean consensus error {noisy.terms['max_mean']:.4g} vs bound {noisy.rhs:.4g} "
        f"(worst slack at round {noisy.terms['worst_round']}); noiseless max {clean.lhs:.2e}"
    )
    return bool(noisy.passed and clean.passed), detail


def check_lemma3() -> CheckResult:
    return _timed("lemma3-monte-carlo", 30.0, lemma3)


# 7 ---------------------------------------------------------------------------


def theorem2_batches(batches: int = 20, traces: int = 50, K: int = 100):
    passed = 0
    sigma = calibrate_sigma(DpBudget(eps=8.0, delta=1e-5, K=K, n=4, c=1.0))
    for b in range(batches):
        problem = make_random_quadratic(4, 8, 1.0, seed=100 + b)
        x0 = tuple(problem.x_star + 2.0)
        cfg = AlgoConfig(gamma=1.0, alpha=1.0, beta=1.0, K=K, x0=x0, sigma_dp=sigma)
        R = realized_residual(problem, initial_state(problem, cfg))
        beta = 0.5 * (cfg.alpha + R)
        cfg = cfg.with_(beta=beta, gamma=theorem1_step_size(problem, R, cfg.alpha, beta))
        runs = [run(problem, cfg.with_(seed=1000 * b + s), "normec") for s in range(traces)]
        rep = check_theorem2_bound(runs, problem, cfg)
        passed += bool(rep.passed)
    frac = passed / batches
    return frac >= 0.95, f"{passed}/{batches} batches below the bound (sigma_dp={sigma:.4g}, need >= 95%)"


def check_theorem2() -> CheckResult:
    return _timed("theorem2-statistical", 120.0, theorem2_batches)


# 8 ---------------------------------------------------------------------------


def _best_final(problem, cfg, algo):
    best = math.inf
    for gamma in STEP_GRID:
        trace = run_safely_final(problem, cfg.with_(gamma=gamma), algo)
        best = min(best, trace)
    return best


def run_safely_final(problem, cfg, algo) -> float:
    from normec.algorithms import run_safely

    trace = run_safely(problem, cfg, algo)
    return math.inf if trace.diverged else trace.final.grad_norm


def ef_benefit(seeds: int = 20, K: int = 1000):
    wins = {0.01: 0, 0.1: 0}
    for s in range(seeds):
        problem = make_random_quadratic(4, 4, 5.0, seed=s)
        cfg = AlgoConfig(gamma=1.0, alpha=0.01, K=K, server_normalization=False)
        # The memoryless baseline has no beta, so it is tuned once per seed.
        baseline = _best_final(problem, cfg, "dpsgd-norm")
        for beta in wins:
            ours = _best_final(problem, cfg.with_(beta=beta), "normec-no-server-norm")
            wins[beta] += ours * 10.0 <= baseline
    passed = all(w >= 0.8 * seeds for w in wins.values())
    return passed, ", ".join(f"beta={b}: {w}/{seeds} seeds with a 10x smaller final gradient norm" for b, w in wins.items())


def check_ef_benefit() -> CheckResult:
    return _timed("ef-benefit", 60.0, ef_benefit)


# 9 ---------------------------------------------------------------------------


def determinism():
    data = {
        "name": "determinism",
        "algo": "normec",
        "problem": {"kind": "quadratic", "n": 4, "d": 6, "heterogeneity": 2.0, "seed": 3},
        "params": {"K": 200, "sigma_dp": 0.5, "beta": 0.1, "alpha": 0.5},
        "grid": {"gamma": [0.01, 0.1], "algo": ["normec", "dp-clip21", "dpsgd-clip"]},
        "variants": [{"tau": 1.0}],
        "repeats": 2,
    }
    cfg = ExperimentConfig.from_dict(data)
    with tempfile.TemporaryDirectory() as tmp:
        outs = [
            run_experiment(cfg, Path(tmp) / "a", workers=1).out_dir,
            run_experiment(cfg, Path(tmp) / "b", workers=1).out_dir,
            run_experiment(cfg, Path(tmp) / "c", workers=3).out_dir,
        ]
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
        same = all((o / f).read_bytes() == (outs[0] / f).read_bytes() for o in outs[1:] for f in files)
        same = same and all(sorted(p.relative_to(o) for p in o.rglob("*.csv")) == files for o in outs[1:])
    return same, f"{len(files)} CSV files byte-identical across reruns and 1 vs 3 workers: {same}"


def check_determinism() -> CheckResult:
    return _timed("determinism", None, determinism)


CHECKS = (check_lemma1, check_example1, check_memory, check_theorem1, check_lemma3, check_theorem2, check_ef_benefit, check_determinism)


def run_all(echo=print) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        out = check()
        for res in out if isinstance(out, list) else [out]:
            results.append(res)
            if echo is not None:
                echo(res.line())
    return results
