"""Independent checkers for the operator identities, memory recursions and bounds.

Two kinds of tools live here:

* report-producing checkers (``track_memory_*``, ``check_theorem*_bound``,
  ``check_noise_accumulation``) that compare a simulation against a closed form;
* scalar reference simulations written with plain floats.  They share no code
  with ``normec.algorithms`` and are used as oracles by the tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from normec.algorithms import (
    AlgoConfig,
    GradAtX0Perturbed,
    RunTrace,
    ZeroMemory,
    initial_state,
    noise_second_moment,
    realized_residual,
    run,
    theorem1_step_size,
)
from normec.operators import clip, smoothed_normalize
from normec.problems import Problem, make_random_quadratic

EPS = np.finfo(np.float64).eps
IDENTITY_RTOL = 1e-12


@dataclass
class MemoryTrackReport:
    residuals: list[float]
    predicted: list[float]
    max_deviation: float
    max_rel_deviation: float
    precondition_ok: bool
    passed: bool | None
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BoundReport:
    name: str
    applicable: bool
    passed: bool | None
    lhs: float = math.nan
    rhs: float = math.nan
    terms: dict = field(default_factory=dict)
    note: str = ""

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    def to_dict(self) -> dict:
        out = asdict(self)
        out["margin"] = self.margin
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


# -- memory recursions --------------------------------------------------------


def track_memory_normalize(g0, g_star, alpha: float, beta: float, steps: int) -> MemoryTrackReport:
    """Iterate ``g <- g + beta * Normalize_alpha(g* - g)`` and compare with the product formula.

    The prediction is ``||g* - g0|| * prod_l |1 - beta / (alpha + ||g* - g^{l-1}||)|``.
    Residuals cannot be resolved below the spacing of floats around ``g*``, so
    the comparison allows ``64 eps * max(||g0||, ||g*||)`` on top of the
    relative tolerance.
    """
    g = np.array(g0, dtype=np.float64)
    g_star = np.asarray(g_star, dtype=np.float64)
    r0 = float(np.linalg.norm(g_star - g))
    precondition = r0 == 0.0 or beta < alpha + r0
    residuals, predicted = [r0], [r0]
    for _ in range(steps):
        r_prev = residuals[-1]
        g = g + beta * smoothed_normalize(g_star - g, alpha)
        residuals.append(float(np.linalg.norm(g_star - g)))
        factor = abs(1.0 - beta / (alpha + r_prev)) if r_prev > 0 else 0.0
        predicted.append(predicted[-1] * factor)
    res, pred = np.array(residuals), np.array(predicted)
    dev = np.abs(res - pred)
    floor = 64 * EPS * max(float(np.linalg.norm(g0)), float(np.linalg.norm(g_star)), 1e-300)
    rel = np.where(pred > 0, dev / np.where(pred > 0, pred, 1.0), np.where(dev > 0, np.inf, 0.0))
    resolvable = pred > floor / IDENTITY_RTOL
    max_rel = float(np.max(rel[resolvable])) if np.any(resolvable) else 0.0
    if not precondition:
        return MemoryTrackReport(residuals, predicted, float(dev.max()), max_rel, False, None, "beta >= alpha + ||g* - g0||; no assertion")
    passed = bool(np.all(dev <= IDENTITY_RTOL * pred + floor))
    return MemoryTrackReport(residuals, predicted, float(dev.max()), max_rel, True, passed)


def track_memory_clip(g0, g_star, tau: float, steps: int, atol: float = 1e-10) -> MemoryTrackReport:
    """Iterate ``g <- g + Clip_tau(g* - g)``.

    Checks that the residual falls by exactly ``tau`` while clipping is active,
    never exceeds ``max(0, r0 - k tau)``, and is zero (within ``atol``) from
    step ``ceil(r0 / tau)`` on.
    """
    g = np.array(g0, dtype=np.float64)
    g_star = np.asarray(g_star, dtype=np.float64)
    r0 = float(np.linalg.norm(g_star - g))
    scale = max(1.0, r0)
    residuals = [r0]
    predicted = [r0]
    ok = True
    arrival = math.ceil(r0 / tau) if r0 > 0 else 0
    for k in range(1, steps + 1):
        r_prev = residuals[-1]
        g = g + clip(g_star - g, tau)
        r = float(np.linalg.norm(g_star - g))
        bound = max(0.0, r0 - k * tau)
        residuals.append(r)
        predicted.append(bound)
        if r > bound + atol * scale:
            ok = False
        if r_prev > tau and abs(r - (r_prev - tau)) > atol * scale:
            ok = False
        if k >= arrival and r > atol * scale:
            ok = False
    dev = np.abs(np.array(residuals) - np.array(predicted))
    pred = np.array(predicted)
    rel = dev[pred > 0] / pred[pred > 0]
    return MemoryTrackReport(residuals, predicted, float(dev.max()), float(rel.max()) if rel.size else 0.0, True, ok)


# -- convergence bounds -------------------------------------------------------


def _theorem_conditions(problem: Problem, cfg: AlgoConfig, R: float) -> str:
    if not cfg.server_normalization:
        return "server normalization is off"
    if not R > 0:
        return "R = 0 admits no positive step size"
    if cfg.beta / (cfg.alpha + R) >= 1.0:
        return f"beta/(alpha+R) = {cfg.beta / (cfg.alpha + R):.6g} is not below 1"
    gmax = cfg.beta * R / ((cfg.alpha + R) * problem.L_max)
    if cfg.gamma > gmax * (1.0 + 1e-12):
        return f"gamma = {cfg.gamma:.6g} exceeds beta R/((alpha+R) L_max) = {gmax:.6g}"
    return ""


def theorem1_rhs(problem: Problem, gap: float, R: float, gamma: float, K: int) -> dict:
    terms = {
        "descent": gap / (gamma * (K + 1)),
        "residual": 2.0 * R,
        "curvature": 0.5 * problem.L * gamma,
    }
    terms["total"] = sum(terms.values())
    return terms


def check_theorem1_bound(trace: RunTrace, problem: Problem, cfg: AlgoConfig, K: int | None = None) -> BoundReport:
    """``min_{k<=K} ||grad f(x^k)|| <= (f(x0)-f_inf)/(gamma(K+1)) + 2R + L gamma/2``.

    ``K`` defaults to the number of rounds in ``trace``; smaller values check
    the bound on a prefix.
    """
    name = "theorem1"
    R = trace.realized_R
    if cfg.sigma_dp > 0:
        return BoundReport(name, False, None, note="theorem inapplicable: sigma_dp > 0")
    reason = _theorem_conditions(problem, cfg, R)
    if reason:
        return BoundReport(name, False, None, note=f"theorem inapplicable: {reason}")
    K = len(trace.rows) - 1 if K is None else K
    rows = trace.rows[: K + 1]
    if len(rows) < K + 1:
        return BoundReport(name, False, None, note=f"trace has only {len(trace.rows)} rows")
    gap = trace.rows[0].loss - problem.f_inf
    terms = theorem1_rhs(problem, gap, R, cfg.gamma, K)
    lhs = min(r.grad_norm for r in rows)
    terms.update(R=R, K=K, gamma=cfg.gamma, L=problem.L, L_max=problem.L_max, gap=gap)
    return BoundReport(name, True, bool(lhs <= terms["total"]), lhs, terms["total"], terms)


def corollary1_constant(problem: Problem, gap: float, D: float, alpha: float, beta: float) -> float:
    """``C = L_max (alpha+D)/(beta D) * gap + 2D + (L/2) beta D / (L_max (alpha+D))``."""
    Lm, L = problem.L_max, problem.L
    return Lm * (alpha + D) / (beta * D) * gap + 2.0 * D + 0.5 * L * beta * D / (Lm * (alpha + D))


def check_corollary1_bound(trace: RunTrace, problem: Problem, cfg: AlgoConfig, D: float) -> BoundReport:
    """``min_k ||grad f(x^k)|| <= C / sqrt(K+1)`` for the schedule built from ``D``."""
    name = "corollary1"
    K = len(trace.rows) - 1
    R = trace.realized_R
    if cfg.sigma_dp > 0 or not cfg.server_normalization:
        return BoundReport(name, False, None, note="corollary inapplicable: needs a noiseless normalized run")
    if not cfg.alpha > cfg.beta:
        return BoundReport(name, False, None, note="corollary inapplicable: alpha must exceed beta")
    if R > D / math.sqrt(K + 1) * (1.0 + 1e-9):
        return BoundReport(name, False, None, note=f"corollary inapplicable: R = {R:.6g} exceeds D/sqrt(K+1)")
    gmax = cfg.beta * D / (problem.L_max * (cfg.alpha + D) * math.sqrt(K + 1))
    if cfg.gamma > gmax * (1.0 + 1e-12):
        return BoundReport(name, False, None, note="corollary inapplicable: gamma too large")
    gap = trace.rows[0].loss - problem.f_inf
    C = corollary1_constant(problem, gap, D, cfg.alpha, cfg.beta)
    rhs = C / math.sqrt(K + 1)
    lhs = trace.min_grad_norm
    return BoundReport(name, True, bool(lhs <= rhs), lhs, rhs, {"C": C, "D": D, "K": K, "R": R})


def theorem2_rhs(problem: Problem, cfg: AlgoConfig, gap: float, R: float, K: int) -> dict:
    terms = theorem1_rhs(problem, gap, R, cfg.gamma, K)
    second_moment = noise_second_moment(cfg, problem.d)
    terms["noise"] = 2.0 * math.sqrt(cfg.beta**2 * (K + 1) * second_moment)
    terms["total"] += terms["noise"]
    # The averaged-noise argument gives the same term divided by sqrt(n).
    terms["noise_over_sqrt_n"] = terms["noise"] / math.sqrt(problem.n)
    terms["noise_second_moment"] = second_moment
    return terms


def check_theorem2_bound(traces: list[RunTrace], problem: Problem, cfg: AlgoConfig, min_traces: int = 30) -> BoundReport:
    """Monte-Carlo check of the private bound.

    The bound controls ``min_k E||grad f(x^k)||``.  The check uses the
    per-round sample mean over ``traces`` and compares its minimum against the
    right-hand side plus three standard errors at the minimizing round.
    """
    name = "theorem2"
    if len(traces) < min_traces:
        return BoundReport(name, False, None, note=f"needs at least {min_traces} traces, got {len(traces)}")
    if any(t.diverged for t in traces):
        return BoundReport(name, True, False, note="a trace diverged")
    R = traces[0].realized_R
    reason = _theorem_conditions(problem, cfg, R)
    if reason:
        return BoundReport(name, False, None, note=f"theorem inapplicable: {reason}")
    norms = np.array([t.grad_norms for t in traces])
    K = norms.shape[1] - 1
    mean = norms.mean(axis=0)
    k_best = int(np.argmin(mean))
    stderr = float(norms[:, k_best].std(ddof=1) / math.sqrt(len(traces)))
    gap = traces[0].rows[0].loss - problem.f_inf
    terms = theorem2_rhs(problem, cfg, gap, R, K)
    terms.update(R=R, K=K, stderr=stderr, best_round=k_best, traces=len(traces))
    lhs = float(mean[k_best])
    return BoundReport(
        name,
        True,
        bool(lhs <= terms["total"] + 3.0 * stderr),
        lhs,
        terms["total"],
        terms,
        note="min over rounds of the sample mean; the bound is on min_k of the expectation",
    )


def noise_accumulation_bound(cfg: AlgoConfig, n: int, d: int) -> float:
    """``sqrt(beta^2 (K+1) E||z_i||^2 / n)``."""
    return math.sqrt(cfg.beta**2 * (cfg.K + 1) * noise_second_moment(cfg, d) / n)


def check_noise_accumulation(problem: Problem, cfg: AlgoConfig, seeds, algo: str = "normec") -> BoundReport:
    """Mean over seeds of ``||ghat^k - mean_i g_i^k||`` against the accumulation bound.

    With ``sigma_dp = 0`` the discrepancy must stay below ``1e-10`` in every run.
    """
    seeds = list(seeds)
    errors = []
    for s in seeds:
        trace = run(problem, cfg.with_(seed=int(s)), algo)
        errors.append([r.consensus_error for r in trace.rows[:-1]])
    errors = np.array(errors)
    bound = noise_accumulation_bound(cfg, problem.n, problem.d)
    if cfg.sigma_dp == 0:
        worst = float(errors.max())
        return BoundReport("lemma3", True, worst <= 1e-10, worst, 1e-10, {"seeds": len(seeds)})
    mean = errors.mean(axis=0)
    stderr = errors.std(axis=0, ddof=1) / math.sqrt(len(seeds))
    slack = bound + 3.0 * stderr - mean
    worst = int(np.argmin(slack))
    return BoundReport(
        "lemma3",
        True,
        bool(np.all(mean <= bound + 3.0 * stderr)),
        float(mean[worst]),
        bound,
        {"seeds": len(seeds), "worst_round": worst + 1, "stderr": float(stderr[worst]), "max_mean": float(mean.max())},
    )


# -- gradient oracle ----------------------------------------------------------


def finite_diff(func, x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (func(x + e) - func(x - e)) / (2 * h)
    return out


def finite_diff_gradient(problem: Problem, client: int, x, h: float) -> np.ndarray:
    return finite_diff(lambda z: problem.client_loss(client, z), x, h)


# -- scalar reference simulations (plain floats, no numpy) -------------------


def scalar_normalize(g: float, alpha: float) -> float:
    denom = alpha + abs(g)
    return 0.0 if denom == 0 else g / denom


def scalar_normec(grads, x0: float, memories, alpha: float, beta: float, gamma: float, K: int, server_normalization=True):
    """One-dimensional noiseless alpha-NormEC; ``grads`` is a list of client gradient functions."""
    x = x0
    g = list(memories)
    n = len(grads)
    g_hat = sum(g) / n
    xs = [x]
    for _ in range(K):
        deltas = [scalar_normalize(grads[i](x) - g[i], alpha) for i in range(n)]
        g = [g[i] + beta * deltas[i] for i in range(n)]
        g_hat = g_hat + beta * sum(deltas) / n
        if server_normalization:
            x = x - gamma * (0.0 if g_hat == 0 else g_hat / abs(g_hat))
        else:
            x = x - gamma * g_hat
        xs.append(x)
    return xs, g, g_hat


def scalar_dpsgd(grads, x0: float, op, gamma: float, K: int):
    x = x0
    xs = [x]
    for _ in range(K):
        x = x - gamma * sum(op(gi(x)) for gi in grads) / len(grads)
        xs.append(x)
    return xs


def scalar_memory_normalize(g0: float, g_star: float, alpha: float, beta: float, steps: int):
    g = g0
    out = [abs(g_star - g)]
    for _ in range(steps):
        g = g + beta * scalar_normalize(g_star - g, alpha)
        out.append(abs(g_star - g))
    return out


# -- theorem suite ------------------------------------------------------------


def theorem1_suite(count: int = 20, K: int = 5000, seed: int = 0, max_n: int = 10, max_d: int = 50):
    """Seeded conforming (problem, config) pairs for the non-private bound.

    Even-indexed instances start from zero memories; odd ones start near the
    true client gradients.  Each uses the largest admissible step size.
    """
    rng = np.random.default_rng(seed)
    out = []
    for j in range(count):
        n = int(rng.integers(2, max_n + 1))
        d = int(rng.integers(2, max_d + 1))
        h = float(rng.uniform(0.5, 5.0))
        problem = make_random_quadratic(n, d, h, seed=seed * 1000 + j)
        x0 = tuple(problem.x_star + rng.standard_normal(d) * 2.0)
        policy = ZeroMemory() if j % 2 == 0 else GradAtX0Perturbed(float(rng.uniform(0.05, 1.0)))
        alpha = float(rng.choice([0.01, 0.1, 1.0]))
        cfg = AlgoConfig(gamma=1.0, alpha=alpha, beta=1.0, K=K, x0=x0, init_policy=policy, seed=seed * 1000 + j)
        R = realized_residual(problem, initial_state(problem, cfg))
        beta = float(rng.uniform(0.1, 0.9)) * (alpha + R)
        gamma = theorem1_step_size(problem, R, alpha, beta)
        out.append((problem, cfg.with_(beta=beta, gamma=gamma)))
    return out
