"""Finite-sum objectives ``f(x) = (1/n) sum_i f_i(x)`` with exact gradients.

Two concrete families are provided: per-client quadratics (exact smoothness
constants and an exact minimum) and l2-regularized logistic regression
(a certified but loose smoothness bound, lower bound 0).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAX_CLIENTS = 10_000
MAX_DIM = 10_000


def _check_scale(n: int, d: int) -> None:
    if n < 1 or d < 1:
        raise ValueError(f"n and d must be positive, got n={n}, d={d}")
    if n > MAX_CLIENTS or d > MAX_DIM:
        raise ValueError(
            f"problem too large for desk-scale simulation: n={n}, d={d} "
            f"(limits {MAX_CLIENTS}, {MAX_DIM})"
        )


class Problem:
    """Base class. Subclasses implement ``client_losses`` and ``client_grads``.

    Attributes:
        n: number of clients.
        d: dimension.
        L_i: per-client smoothness constants, shape ``(n,)``.
        L: smoothness constant of the average ``f``.
        f_inf: certified lower bound on ``f``.
    """

    kind = "abstract"

    n: int
    d: int
    L_i: np.ndarray
    L: float
    f_inf: float

    @property
    def L_max(self) -> float:
        return float(np.max(self.L_i))

    def client_losses(self, x) -> np.ndarray:
        raise NotImplementedError

    def client_grads(self, x) -> np.ndarray:
        """Stacked per-client gradients, shape ``(n, d)``."""
        raise NotImplementedError

    def client_losses_and_grads(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.client_losses(x), self.client_grads(x)

    def client_loss(self, i: int, x) -> float:
        return float(self.client_losses(x)[i])

    def client_grad(self, i: int, x) -> np.ndarray:
        return self.client_grads(x)[i]

    def loss(self, x) -> float:
        return float(np.mean(self.client_losses(x)))

    def grad(self, x) -> np.ndarray:
        return np.mean(self.client_grads(x), axis=0)

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


class QuadraticProblem(Problem):
    """``f_i(x) = 1/2 (x - b_i)^T A_i (x - b_i)`` with symmetric PSD ``A_i``."""

    kind = "quadratic"

    def __init__(self, A, b, seed: int | None = None, heterogeneity: float | None = None):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError(f"A must have shape (n, d, d), got {A.shape}")
        if b.shape != A.shape[:2]:
            raise ValueError(f"b must have shape {A.shape[:2]}, got {b.shape}")
        n, d = b.shape
        _check_scale(n, d)
        if not np.allclose(A, np.transpose(A, (0, 2, 1)), rtol=0, atol=1e-12):
            raise ValueError("every A_i must be symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig.min() < -1e-10 * max(1.0, eig.max()):
            raise ValueError("every A_i must be positive semidefinite")

        self.A = A
        self.b = b
        self.n, self.d = n, d
        self.seed = seed
        self.heterogeneity = heterogeneity
        self.L_i = np.maximum(eig[:, -1], 0.0)
        A_mean = A.mean(axis=0)
        self.L = float(max(np.linalg.eigvalsh(A_mean)[-1], 0.0))
        self.x_star, self.f_inf = self._minimize()

    def _minimize(self):
        H = self.A.sum(axis=0)
        rhs = np.einsum("nij,nj->i", self.A, self.b)
        x_star, *_ = np.linalg.lstsq(H, rhs, rcond=None)
        return x_star, self.loss(x_star)

    def client_losses(self, x) -> np.ndarray:
        return self.client_losses_and_grads(x)[0]

    def client_grads(self, x) -> np.ndarray:
        r = np.asarray(x, dtype=np.float64) - self.b
        return np.matmul(self.A, r[:, :, None])[:, :, 0]

    def client_losses_and_grads(self, x) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(x, dtype=np.float64) - self.b
        grads = np.matmul(self.A, r[:, :, None])[:, :, 0]
        return 0.5 * (r * grads).sum(axis=1), grads

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "d": self.d,
            "seed": self.seed,
            "heterogeneity": self.heterogeneity,
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "L_i": self.L_i.tolist(),
            "L": self.L,
            "f_inf": self.f_inf,
        }


class LogisticProblem(Problem):
    """``f_i(x) = mean_j log(1 + exp(-y_ij a_ij^T x)) + (lam/2)||x||^2``.

    ``L_i = max_j ||a_ij||^2 / 4 + lam`` bounds the Hessian; ``f_inf = 0`` since
    both terms are nonnegative.
    """

    kind = "logistic"

    def __init__(self, features, labels, lam: float = 1e-3, seed: int | None = None):
        self.features = [np.asarray(X, dtype=np.float64) for X in features]
        self.labels = [np.asarray(y, dtype=np.float64) for y in labels]
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must list the same clients")
        n = len(self.features)
        d = self.features[0].shape[1] if n else 0
        _check_scale(n, d)
        for X, y in zip(self.features, self.labels):
            if X.ndim != 2 or X.shape[1] != d or y.shape != (X.shape[0],):
                raise ValueError("inconsistent client data shapes")
            if np.any(np.abs(y) != 1.0):
                raise ValueError("labels must be +1 or -1")
        if lam < 0:
            raise ValueError(f"lam must be nonnegative, got {lam}")
        self.n, self.d = n, d
        self.lam = float(lam)
        self.seed = seed
        row_sq = [float(np.max(np.sum(X * X, axis=1))) if len(X) else 0.0 for X in self.features]
        self.L_i = np.array(row_sq) / 4.0 + self.lam
        # Hessian of the average is bounded by the average of client bounds.
        self.L = float(np.mean(self.L_i))
        self.f_inf = 0.0

    def client_losses(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        reg = 0.5 * self.lam * float(x @ x)
        out = np.empty(self.n)
        for i, (X, y) in enumerate(zip(self.features, self.labels)):
            data = np.mean(np.logaddexp(0.0, -y * (X @ x))) if len(y) else 0.0
            out[i] = data + reg
        return out

    def client_grads(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty((self.n, self.d))
        for i, (X, y) in enumerate(zip(self.features, self.labels)):
            if len(y):
                # d/dm log(1 + e^{-m}) = -sigmoid(-m)
                weight = -y * _sigmoid(-y * (X @ x))
                out[i] = X.T @ weight / len(y)
            else:
                out[i] = 0.0
            out[i] += self.lam * x
        return out

    def accuracy(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        hits = sum(int(np.sum(np.where(X @ x >= 0, 1.0, -1.0) == y)) for X, y in zip(self.features, self.labels))
        total = sum(len(y) for y in self.labels)
        return hits / total if total else float("nan")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "d": self.d,
            "seed": self.seed,
            "lam": self.lam,
            "features": [X.tolist() for X in self.features],
            "labels": [y.tolist() for y in self.labels],
            "L_i": self.L_i.tolist(),
            "L": self.L,
            "f_inf": self.f_inf,
        }


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -t))


def make_counterexample() -> QuadraticProblem:
    """Two clients on the line: ``f_1 = (x-3)^2/2`` and ``f_2 = (x+3)^2/2``.

    At ``x = 2`` the normalized client gradients are -1 and +1, so their mean
    vanishes although ``f'(2) = 2``.
    """
    return QuadraticProblem(A=np.ones((2, 1, 1)), b=np.array([[3.0], [-3.0]]))


def make_random_quadratic(n: int, d: int, heterogeneity: float, seed: int) -> QuadraticProblem:
    """Random quadratic clients sharing a base curvature.

    ``A_i = S + h/(1+h) * E_i`` and ``b_i = c + h * xi_i / sqrt(d)`` where ``S``
    has spectrum in ``[0.5, 1.5]``, each ``E_i`` is PSD with unit spectral norm
    and ``xi_i`` is standard normal, so ``h`` is roughly the distance between
    client optima. With ``h = 0`` all clients coincide.
    """
    _check_scale(n, d)
    if heterogeneity < 0:
        raise ValueError(f"heterogeneity must be nonnegative, got {heterogeneity}")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    S = (Q * rng.uniform(0.5, 1.5, size=d)) @ Q.T
    center = rng.standard_normal(d)
    spread = heterogeneity / (1.0 + heterogeneity)
    A = np.empty((n, d, d))
    b = np.empty((n, d))
    for i in range(n):
        M = rng.standard_normal((d, d))
        E = M @ M.T
        E /= np.linalg.eigvalsh(E)[-1]
        A[i] = S + spread * E
        b[i] = center + heterogeneity * rng.standard_normal(d) / np.sqrt(d)
    A = 0.5 * (A + np.transpose(A, (0, 2, 1)))
    return QuadraticProblem(A, b, seed=seed, heterogeneity=heterogeneity)


def make_logistic(n: int, d: int, samples_per_client: int, seed: int, lam: float = 1e-3) -> LogisticProblem:
    """Synthetic binary classification split across ``n`` clients.

    Each client draws its features around a client-specific mean, which makes
    the local optima differ; labels follow a shared planted separator with 10%
    label noise.
    """
    _check_scale(n, d)
    if samples_per_client < 1:
        raise ValueError("samples_per_client must be positive")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(d)
    features, labels = [], []
    for _ in range(n):
        shift = rng.standard_normal(d)
        X = rng.standard_normal((samples_per_client, d)) + shift
        y = np.where(X @ w_true >= 0, 1.0, -1.0)
        flip = rng.random(samples_per_client) < 0.1
        y[flip] *= -1.0
        features.append(X)
        labels.append(y)
    return LogisticProblem(features, labels, lam=lam, seed=seed)


def problem_from_dict(data: dict) -> Problem:
    kind = data["kind"]
    if kind == "quadratic":
        return QuadraticProblem(data["A"], data["b"], seed=data.get("seed"), heterogeneity=data.get("heterogeneity"))
    if kind == "logistic":
        return LogisticProblem(data["features"], data["labels"], lam=data["lam"], seed=data.get("seed"))
    raise ValueError(f"unknown problem kind {kind!r}")


def load_problem(path) -> Problem:
    return problem_from_dict(json.loads(Path(path).read_text()))


def make_problem(kind: str, **params) -> Problem:
    """Build a problem from a generator name and its keyword parameters."""
    if kind == "counterexample":
        return make_counterexample()
    if kind == "quadratic":
        return make_random_quadratic(int(params["n"]), int(params["d"]), float(params.get("heterogeneity", 1.0)), int(params.get("seed", 0)))
    if kind == "logistic":
        return make_logistic(
            int(params["n"]),
            int(params["d"]),
            int(params.get("samples_per_client", 50)),
            int(params.get("seed", 0)),
            lam=float(params.get("lam", 1e-3)),
        )
    if kind == "file":
        return load_problem(params["path"])
    raise ValueError(f"unknown problem kind {kind!r}")
