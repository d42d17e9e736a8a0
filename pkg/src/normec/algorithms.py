"""Round-synchronous simulation of alpha-NormEC and its baselines.

All clients are simulated in one process.  A round reads the server iterate,
computes every client's update (rows of an ``(n, d)`` array), reduces them in
client order and applies the server step.  Randomness comes from one stream
per (purpose, round, client) derived from the run seed, so the order in which
clients are evaluated never changes a trajectory.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from normec.operators import Clip, Operator, SmoothedNormalize, TopK, row_norms
from normec.problems import Problem

DIVERGENCE_THRESHOLD = 1e12
# Relative slack for online residual checks; the bound can be tight when the
# step size sits exactly at its admissible maximum.
RESIDUAL_RTOL = 1e-9
BETA_MARGIN = 1e-9

_NOISE_TAG = 1
_INIT_TAG = 2
_SERVER_TAG = 3

CSV_COLUMNS = ("round", "loss", "grad_norm", "max_residual", "ghat_norm", "wallclock_ms")


class DivergenceError(RuntimeError):
    """Raised when an iterate or estimator becomes non-finite or exceeds the threshold."""

    def __init__(self, round_: int, reason: str, trace: "RunTrace | None" = None):
        super().__init__(f"run diverged at round {round_}: {reason}")
        self.round = round_
        self.reason = reason
        self.trace = trace


@dataclass(frozen=True)
class ZeroMemory:
    """Start every client memory at the zero vector."""


@dataclass(frozen=True)
class GradAtX0Perturbed:
    """Start ``g_i = grad f_i(x0) + r_target * u_i`` for random unit ``u_i``."""

    r_target: float

    def __post_init__(self):
        if not self.r_target > 0:
            raise ValueError(f"r_target must be positive, got {self.r_target}")


InitPolicy = ZeroMemory | GradAtX0Perturbed


@dataclass(frozen=True)
class AlgoConfig:
    """Hyperparameters of one run.

    ``sigma_dp`` is the standard deviation of the Gaussian noise a client adds
    to each transmission. With ``noise_convention="coordinate"`` it is the
    per-coordinate std (``E||z||^2 = d sigma^2``); with ``"vector"`` it is the
    root of the total variance (``E||z||^2 = sigma^2``).
    """

    gamma: float
    beta: float = 1.0
    alpha: float = 0.0
    K: int = 100
    tau: float | None = None
    sigma_dp: float = 0.0
    server_normalization: bool = True
    init_policy: InitPolicy = field(default_factory=ZeroMemory)
    seed: int = 0
    x0: tuple[float, ...] | None = None
    noise_convention: str = "coordinate"
    dpsgd_noise: str = "client"
    topk: int = 1
    divergence_threshold: float = DIVERGENCE_THRESHOLD

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.K < 0:
            raise ValueError(f"K must be nonnegative, got {self.K}")
        if self.sigma_dp < 0:
            raise ValueError(f"sigma_dp must be nonnegative, got {self.sigma_dp}")
        if self.noise_convention not in ("coordinate", "vector"):
            raise ValueError(f"noise_convention must be 'coordinate' or 'vector', got {self.noise_convention!r}")
        if self.dpsgd_noise not in ("client", "server"):
            raise ValueError(f"dpsgd_noise must be 'client' or 'server', got {self.dpsgd_noise!r}")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    def with_(self, **changes) -> "AlgoConfig":
        return replace(self, **changes)


@dataclass
class RunState:
    x: np.ndarray
    g_hat: np.ndarray
    g_clients: np.ndarray
    round: int = 0

    def copy(self) -> "RunState":
        return RunState(self.x.copy(), self.g_hat.copy(), self.g_clients.copy(), self.round)


@dataclass
class RoundMetrics:
    """Measurements of one round.

    ``loss``, ``grad_norm``, ``max_residual`` and ``ghat_norm`` describe the
    state at the start of round ``round`` (``x^k``, ``g_i^k``, ``ghat^k``).  The
    remaining fields describe the update and are NaN on the final row of a trace.
    """

    round: int
    loss: float
    grad_norm: float
    max_residual: float
    ghat_norm: float
    next_ghat_norm: float = math.nan
    max_delta_norm: float = math.nan
    max_post_residual: float = math.nan
    consensus_error: float = math.nan
    wallclock_ms: float = 0.0


class NoiseSource:
    """Counter-based Gaussian noise: one generator per (purpose, round, client)."""

    def __init__(self, seed: int, sigma: float, convention: str = "coordinate"):
        self.seed = int(seed)
        self.sigma = float(sigma)
        self.convention = convention

    def scale(self, d: int) -> float:
        if self.convention == "vector":
            return self.sigma / math.sqrt(d)
        return self.sigma

    def client(self, k: int, i: int, d: int) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros(d)
        rng = np.random.default_rng([self.seed, _NOISE_TAG, k, i])
        return self.scale(d) * rng.standard_normal(d)

    def clients(self, k: int, n: int, d: int) -> np.ndarray:
        return np.stack([self.client(k, i, d) for i in range(n)])

    def server(self, k: int, d: int) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros(d)
        rng = np.random.default_rng([self.seed, _SERVER_TAG, k])
        return self.scale(d) * rng.standard_normal(d)

    @classmethod
    def from_config(cls, cfg: AlgoConfig) -> "NoiseSource":
        return cls(cfg.seed, cfg.sigma_dp, cfg.noise_convention)


def noise_second_moment(cfg: AlgoConfig, d: int) -> float:
    """``E||z_i||^2`` of one client's transmission noise."""
    if cfg.noise_convention == "vector":
        return cfg.sigma_dp**2
    return d * cfg.sigma_dp**2


def _apply_rows(op: Callable, M: np.ndarray) -> np.ndarray:
    rows = getattr(op, "rows", None)
    if rows is not None:
        return rows(M)
    return np.stack([op(row) for row in M])


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(v @ v))


def initial_state(problem: Problem, cfg: AlgoConfig) -> RunState:
    """Build ``x^0``, the client memories ``g_i^0`` and ``ghat^0 = mean_i g_i^0``."""
    x0 = np.zeros(problem.d) if cfg.x0 is None else np.array(cfg.x0, dtype=np.float64)
    if x0.shape != (problem.d,):
        raise ValueError(f"x0 has dimension {x0.size}, problem has d={problem.d}")
    policy = cfg.init_policy
    if isinstance(policy, ZeroMemory):
        g = np.zeros((problem.n, problem.d))
    elif isinstance(policy, GradAtX0Perturbed):
        g = problem.client_grads(x0).copy()
        for i in range(problem.n):
            u = np.random.default_rng([cfg.seed, _INIT_TAG, i]).standard_normal(problem.d)
            g[i] += policy.r_target * u / np.linalg.norm(u)
    else:
        raise TypeError(f"unknown init policy {policy!r}")
    return RunState(x=x0, g_hat=g.sum(axis=0) / problem.n, g_clients=g, round=0)


def realized_residual(problem: Problem, state: RunState) -> float:
    """``R = max_i ||grad f_i(x) - g_i||`` for the given state."""
    return float(np.max(row_norms(problem.client_grads(state.x) - state.g_clients)))


def theorem1_step_size(problem: Problem, R: float, alpha: float, beta: float) -> float:
    """Largest step size ``beta R / ((alpha + R) L_max)`` keeping residuals bounded by ``R``.

    Raises ``ValueError`` unless ``beta / (alpha + R) <= 1 - 1e-9``.
    """
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    if beta / (alpha + R) > 1.0 - BETA_MARGIN:
        raise ValueError(f"beta/(alpha+R) = {beta / (alpha + R):.6g} must be below 1")
    return beta * R / ((alpha + R) * problem.L_max)


def corollary1_schedule(problem: Problem, D: float, alpha: float, beta: float, K: int) -> tuple[float, float]:
    """Initial residual ``R = D/sqrt(K+1)`` and step ``gamma = beta D / (L_max (alpha+D) sqrt(K+1))``."""
    if not D > 0:
        raise ValueError(f"D must be positive, got {D}")
    if not alpha > beta:
        raise ValueError(f"alpha={alpha} must exceed beta={beta}")
    root = math.sqrt(K + 1)
    return D / root, beta * D / (problem.L_max * (alpha + D) * root)


def is_conforming(problem: Problem, cfg: AlgoConfig, R: float) -> bool:
    """Whether ``(beta, alpha, gamma)`` satisfy the residual-boundedness conditions for ``R``."""
    if not cfg.server_normalization or not R > 0:
        return False
    if cfg.beta / (cfg.alpha + R) >= 1.0:
        return False
    return cfg.gamma <= cfg.beta * R / ((cfg.alpha + R) * problem.L_max) * (1.0 + 1e-12)


def _point_metrics(problem: Problem, state: RunState, losses: np.ndarray, grads: np.ndarray) -> RoundMetrics:
    return RoundMetrics(
        round=state.round,
        loss=float(losses.sum() / problem.n),
        grad_norm=_norm(grads.sum(axis=0) / problem.n),
        max_residual=float(row_norms(grads - state.g_clients).max()),
        ghat_norm=_norm(state.g_hat),
    )


def _check_finite(state: RunState, metrics: RoundMetrics, threshold: float) -> None:
    values = {
        "loss": abs(metrics.loss),
        "gradient norm": metrics.grad_norm,
        "||x||": _norm(state.x),
        "||ghat||": metrics.ghat_norm,
        "client memory norm": float(row_norms(state.g_clients).max()),
    }
    for name, value in values.items():
        if not value <= threshold:
            raise DivergenceError(metrics.round, f"{name} = {value:g} (threshold {threshold:g})")


def _server_step(x: np.ndarray, g_hat: np.ndarray, gamma: float, normalize: bool) -> np.ndarray:
    if not normalize:
        return x - gamma * g_hat
    norm = _norm(g_hat)
    if norm == 0.0:
        return x.copy()
    return x - gamma * (g_hat / norm)


def _error_feedback_round(
    state: RunState,
    problem: Problem,
    cfg: AlgoConfig,
    op: Callable,
    noise: NoiseSource | None,
    server_normalization: bool,
) -> tuple[RunState, RoundMetrics]:
    n, d = problem.n, problem.d
    k = state.round
    losses, grads = problem.client_losses_and_grads(state.x)
    metrics = _point_metrics(problem, state, losses, grads)
    _check_finite(state, metrics, cfg.divergence_threshold)

    delta = _apply_rows(op, grads - state.g_clients)
    g_clients = state.g_clients + cfg.beta * delta
    sent = delta if noise is None or noise.sigma == 0.0 else delta + noise.clients(k, n, d)
    g_hat = state.g_hat + (cfg.beta / n) * sent.sum(axis=0)
    x = _server_step(state.x, g_hat, cfg.gamma, server_normalization)
    new = RunState(x=x, g_hat=g_hat, g_clients=g_clients, round=k + 1)

    metrics.next_ghat_norm = _norm(g_hat)
    metrics.max_delta_norm = float(row_norms(delta).max())
    metrics.max_post_residual = float(row_norms(grads - g_clients).max())
    metrics.consensus_error = _norm(g_hat - g_clients.sum(axis=0) / n)
    return new, metrics


def normec_round(
    state: RunState, problem: Problem, cfg: AlgoConfig, noise: NoiseSource | None = None
) -> tuple[RunState, RoundMetrics]:
    """One round of (DP-)alpha-NormEC.

    Clients normalize their residual ``grad f_i(x) - g_i``, move their memory by
    ``beta`` times the noiseless result and transmit it with optional Gaussian
    noise.  The server accumulates the transmissions into ``ghat`` and steps
    along ``ghat/||ghat||`` (or ``ghat`` when server normalization is off).
    """
    op = SmoothedNormalize(cfg.alpha)
    return _error_feedback_round(state, problem, cfg, op, noise, cfg.server_normalization)


def ef21_round(
    state: RunState, problem: Problem, cfg: AlgoConfig, operator: Operator, noise: NoiseSource | None = None
) -> tuple[RunState, RoundMetrics]:
    """EF21-style round with an arbitrary operator and the plain step ``x - gamma * ghat``.

    ``Clip(tau)`` with ``beta = 1`` is Clip21; passing a noise source gives DP-Clip21.
    """
    return _error_feedback_round(state, problem, cfg, operator, noise, False)


def dpsgd_round(
    state: RunState, problem: Problem, cfg: AlgoConfig, operator: Operator, noise: NoiseSource | None = None
) -> tuple[RunState, RoundMetrics]:
    """Memoryless step ``x - gamma * (mean_i Psi(grad f_i(x)) + z)``.

    With ``cfg.dpsgd_noise == "client"`` every client perturbs its own output
    and ``z`` is their average; with ``"server"`` a single draw is added.
    """
    n, d = problem.n, problem.d
    k = state.round
    losses, grads = problem.client_losses_and_grads(state.x)
    metrics = _point_metrics(problem, state, losses, grads)
    _check_finite(state, metrics, cfg.divergence_threshold)

    psi = _apply_rows(operator, grads)
    update = psi.sum(axis=0) / n
    if noise is not None and noise.sigma > 0.0:
        if cfg.dpsgd_noise == "client":
            update = update + noise.clients(k, n, d).sum(axis=0) / n
        else:
            update = update + noise.server(k, d)
    x = state.x - cfg.gamma * update
    new = RunState(x=x, g_hat=update, g_clients=state.g_clients, round=k + 1)

    metrics.next_ghat_norm = _norm(update)
    metrics.max_delta_norm = float(row_norms(psi).max())
    return new, metrics


ALGORITHMS = (
    "normec",
    "normec-no-server-norm",
    "clip21",
    "dp-clip21",
    "dpsgd-clip",
    "dpsgd-norm",
    "ef21-topk",
)


def round_function(algo: str, cfg: AlgoConfig):
    """Resolve an algorithm id to ``step(state, problem, cfg, noise)``."""

    def need_tau() -> float:
        if cfg.tau is None:
            raise ValueError(f"algorithm {algo!r} needs a clipping threshold tau")
        return cfg.tau

    if algo == "normec":
        return normec_round
    if algo == "normec-no-server-norm":
        return lambda s, p, c, z: normec_round(s, p, c.with_(server_normalization=False), z)
    if algo in ("clip21", "dp-clip21"):
        op = Clip(need_tau())
        return lambda s, p, c, z: ef21_round(s, p, c, op, z)
    if algo == "ef21-topk":
        op = TopK(cfg.topk)
        return lambda s, p, c, z: ef21_round(s, p, c, op, z)
    if algo == "dpsgd-clip":
        op = Clip(need_tau())
        return lambda s, p, c, z: dpsgd_round(s, p, c, op, z)
    if algo == "dpsgd-norm":
        op = SmoothedNormalize(cfg.alpha)
        return lambda s, p, c, z: dpsgd_round(s, p, c, op, z)
    raise ValueError(f"unknown algorithm {algo!r}; choose from {', '.join(ALGORITHMS)}")


@dataclass
class RunTrace:
    algo: str
    cfg: AlgoConfig
    rows: list[RoundMetrics]
    final_state: RunState
    realized_R: float
    conforming: bool
    residual_violations: list[int] = field(default_factory=list)
    diverged: bool = False
    diverged_round: int | None = None
    divergence_reason: str = ""

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([r.grad_norm for r in self.rows])

    @property
    def min_grad_norm(self) -> float:
        return float(np.min(self.grad_norms)) if self.rows else math.nan

    @property
    def best_round(self) -> int:
        if not self.rows:
            return -1
        return int(self.rows[int(np.argmin(self.grad_norms))].round)

    @property
    def final(self) -> RoundMetrics:
        return self.rows[-1]

    @property
    def initial_loss(self) -> float:
        return self.rows[0].loss

    def summary(self) -> dict:
        return {
            "algo": self.algo,
            "rounds": max(len(self.rows) - 1, 0),
            "min_grad_norm": self.min_grad_norm,
            "best_round": self.best_round,
            "final_grad_norm": self.final.grad_norm if self.rows else math.nan,
            "final_loss": self.final.loss if self.rows else math.nan,
            "realized_R": self.realized_R,
            "conforming": self.conforming,
            "residual_violations": len(self.residual_violations),
            "diverged": self.diverged,
            "diverged_round": self.diverged_round,
        }

    def to_csv(self, thin: int = 1) -> str:
        """CSV text with one row per round (every ``thin``-th plus the last)."""
        if thin < 1:
            raise ValueError("thin must be >= 1")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        last = len(self.rows) - 1
        for idx, r in enumerate(self.rows):
            if idx % thin and idx != last:
                continue
            writer.writerow(
                [r.round, repr(r.loss), repr(r.grad_norm), repr(r.max_residual), repr(r.ghat_norm), repr(r.wallclock_ms)]
            )
        return buf.getvalue()

    def write_csv(self, path, thin: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv(thin))


def run(
    problem: Problem,
    cfg: AlgoConfig,
    algo: str = "normec",
    *,
    record_timing: bool = False,
    state: RunState | None = None,
) -> RunTrace:
    """Run ``cfg.K`` rounds of ``algo`` and collect a trace of ``K + 1`` rows.

    For conforming alpha-NormEC runs the residual bound
    ``max_i ||grad f_i(x^k) - g_i^k|| <= R`` is checked every round and any
    violating round is recorded in ``residual_violations``.

    Raises ``DivergenceError`` (with ``.trace`` holding the rows so far) when
    a value becomes non-finite or exceeds ``cfg.divergence_threshold``.
    """
    step = round_function(algo, cfg)
    noise = NoiseSource.from_config(cfg)
    state = initial_state(problem, cfg) if state is None else state.copy()
    R = realized_residual(problem, state)
    conforming = algo == "normec" and is_conforming(problem, cfg, R)
    trace = RunTrace(algo=algo, cfg=cfg, rows=[], final_state=state, realized_R=R, conforming=conforming)
    limit = R * (1.0 + RESIDUAL_RTOL)

    for _ in range(cfg.K):
        start = time.perf_counter() if record_timing else 0.0
        try:
            new_state, metrics = step(state, problem, cfg, noise)
        except DivergenceError as err:
            trace.diverged, trace.diverged_round, trace.divergence_reason = True, err.round, err.reason
            trace.final_state = state
            err.trace = trace
            raise
        if record_timing:
            metrics.wallclock_ms = (time.perf_counter() - start) * 1e3
        if conforming and metrics.max_residual > limit:
            trace.residual_violations.append(metrics.round)
        trace.rows.append(metrics)
        state = new_state

    losses, grads = problem.client_losses_and_grads(state.x)
    last = _point_metrics(problem, state, losses, grads)
    trace.final_state = state
    try:
        _check_finite(state, last, cfg.divergence_threshold)
    except DivergenceError as err:
        trace.diverged, trace.diverged_round, trace.divergence_reason = True, err.round, err.reason
        err.trace = trace
        raise
    if conforming and last.max_residual > limit:
        trace.residual_violations.append(last.round)
    trace.rows.append(last)
    return trace


def run_safely(problem: Problem, cfg: AlgoConfig, algo: str = "normec", **kwargs) -> RunTrace:
    """Like ``run`` but returns the partial trace of a diverged run instead of raising."""
    try:
        return run(problem, cfg, algo, **kwargs)
    except DivergenceError as err:
        return err.trace
