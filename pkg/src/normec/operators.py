"""Bounded-norm update operators.

Every operator maps a gradient-like vector in R^d to R^d.  Smoothed
normalization and clipping are the two bias-inducing operators used to bound
client sensitivity; TopK is kept only as a contractive-compressor fixture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_vector(g) -> np.ndarray:
    return np.asarray(g, dtype=np.float64)


def row_norms(M: np.ndarray) -> np.ndarray:
    """Euclidean norm of every row of a 2-d array."""
    return np.sqrt((M * M).sum(axis=1))


def _cap_rows(out: np.ndarray, bound: float) -> np.ndarray:
    # Rounding can push a row norm one ulp past the bound; the bound is the DP
    # sensitivity, so it must hold exactly.
    norms = row_norms(out)
    while np.any(norms > bound):
        over = norms > bound
        out[over] *= np.nextafter(bound / norms[over], 0.0)[:, None]
        norms = row_norms(out)
    return out


def smoothed_normalize_rows(M: np.ndarray, alpha: float) -> np.ndarray:
    """Apply ``smoothed_normalize`` to every row of ``M``."""
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    M = np.asarray(M, dtype=np.float64)
    denom = alpha + row_norms(M)
    safe = np.where(denom == 0.0, 1.0, denom)
    return _cap_rows(M / safe[:, None], 1.0)


def clip_rows(M: np.ndarray, tau: float) -> np.ndarray:
    """Apply ``clip`` to every row of ``M``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    M = np.asarray(M, dtype=np.float64)
    norms = row_norms(M)
    out = M.copy()
    active = norms > tau
    if np.any(active):
        out[active] = M[active] * (tau / norms[active])[:, None]
        out[active] = _cap_rows(out[active], tau)
    return out


def top_k_rows(M: np.ndarray, k: int) -> np.ndarray:
    """Apply ``top_k`` to every row of ``M``."""
    M = np.asarray(M, dtype=np.float64)
    if not 1 <= k <= M.shape[1]:
        raise ValueError(f"k must lie in [1, {M.shape[1]}], got {k}")
    keep = np.argsort(-np.abs(M), axis=1, kind="stable")[:, :k]
    out = np.zeros_like(M)
    rows = np.arange(M.shape[0])[:, None]
    out[rows, keep] = M[rows, keep]
    return out


def smoothed_normalize(g, alpha: float) -> np.ndarray:
    """Return ``g / (alpha + ||g||)``.

    ``alpha = 0`` gives standard normalization; the zero vector maps to the
    zero vector for every ``alpha`` (0/0 is read as 0).
    """
    g = _as_vector(g)
    return smoothed_normalize_rows(g.reshape(1, -1), alpha).reshape(g.shape)


def normalize(g) -> np.ndarray:
    return smoothed_normalize(g, 0.0)


def clip(g, tau: float) -> np.ndarray:
    """Scale ``g`` by ``min(1, tau/||g||)``; returns a copy of ``g`` when inactive."""
    g = _as_vector(g)
    return clip_rows(g.reshape(1, -1), tau).reshape(g.shape)


def top_k(g, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude coordinates (ties broken by lowest index)."""
    g = _as_vector(g)
    return top_k_rows(g.reshape(1, -1), k).reshape(g.shape)


def residual_after_step(g, alpha: float, beta: float) -> float:
    """Norm of ``g - beta * smoothed_normalize(g, alpha)``."""
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    g = _as_vector(g)
    return float(np.linalg.norm(g - beta * smoothed_normalize(g, alpha)))


def predicted_residual(norm_g: float, alpha: float, beta: float) -> float:
    """Closed form ``|1 - beta/(alpha + ||g||)| * ||g||`` of the residual."""
    if norm_g == 0.0:
        return 0.0
    return abs(1.0 - beta / (alpha + norm_g)) * norm_g


# Operator objects. Each is a frozen dataclass so configs can carry them and
# compare them by value.


@dataclass(frozen=True)
class SmoothedNormalize:
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")

    def __call__(self, g) -> np.ndarray:
        return smoothed_normalize(g, self.alpha)

    def rows(self, M) -> np.ndarray:
        return smoothed_normalize_rows(M, self.alpha)

    @property
    def sensitivity(self) -> float:
        return 1.0


@dataclass(frozen=True)
class StandardNormalize:
    def __call__(self, g) -> np.ndarray:
        return smoothed_normalize(g, 0.0)

    def rows(self, M) -> np.ndarray:
        return smoothed_normalize_rows(M, 0.0)

    @property
    def sensitivity(self) -> float:
        return 1.0


@dataclass(frozen=True)
class Clip:
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def __call__(self, g) -> np.ndarray:
        return clip(g, self.tau)

    def rows(self, M) -> np.ndarray:
        return clip_rows(M, self.tau)

    @property
    def sensitivity(self) -> float:
        return self.tau


@dataclass(frozen=True)
class TopK:
    """Top-k sparsifier; contractive with ``eta = 1 - sqrt(1 - k/d)``."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")

    def __call__(self, g) -> np.ndarray:
        return top_k(g, self.k)

    def rows(self, M) -> np.ndarray:
        return top_k_rows(M, self.k)

    @property
    def sensitivity(self) -> float:
        return float("inf")

    def contraction(self, d: int) -> float:
        if self.k > d:
            raise ValueError(f"k={self.k} exceeds dimension {d}")
        return 1.0 - np.sqrt(1.0 - self.k / d)


Operator = SmoothedNormalize | StandardNormalize | Clip | TopK


def operator_from_dict(spec: dict) -> Operator:
    kind = spec["kind"]
    if kind == "smoothed_normalize":
        return SmoothedNormalize(float(spec["alpha"]))
    if kind == "normalize":
        return StandardNormalize()
    if kind == "clip":
        return Clip(float(spec["tau"]))
    if kind == "top_k":
        return TopK(int(spec["k"]))
    raise ValueError(f"unknown operator kind {kind!r}")


def operator_to_dict(op: Operator) -> dict:
    if isinstance(op, SmoothedNormalize):
        return {"kind": "smoothed_normalize", "alpha": op.alpha}
    if isinstance(op, StandardNormalize):
        return {"kind": "normalize"}
    if isinstance(op, Clip):
        return {"kind": "clip", "tau": op.tau}
    if isinstance(op, TopK):
        return {"kind": "top_k", "k": op.k}
    raise TypeError(f"not an operator: {op!r}")
