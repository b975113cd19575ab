"""RBF kernel machinery shared by both experts.

Includes the plain kernel ridge fit for standalone experts and the joint
closed-form solve that fits both experts at once under a fixed gating
vector by solving the stacked stationarity system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "DIAG_JITTER",
    "ExpertHyperparams",
    "KernelExpert",
    "SingularSystemError",
    "rbf_kernel",
    "kernel_matrix",
    "cross_kernel_matrix",
    "krr_fit",
    "expert_predict",
    "joint_expert_solve",
    "alternating_expert_solve",
]

DIAG_JITTER = 1e-10


class SingularSystemError(RuntimeError):
    """A kernel system could not be solved reliably even with jitter."""


@dataclass(frozen=True)
class ExpertHyperparams:
    ridge_weight: float
    kernel_width: float

    def __post_init__(self):
        if not (math.isfinite(self.ridge_weight) and self.ridge_weight > 0):
            raise ValueError("ridge_weight must be a positive real")
        if not (math.isfinite(self.kernel_width) and self.kernel_width > 0):
            raise ValueError("kernel_width must be a positive real")


def rbf_kernel(u, v, width: float) -> float:
    """exp(-||u - v||^2 / (2 width^2)) for equal-length vectors."""
    if width <= 0:
        raise ValueError("width must be positive")
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError("rbf_kernel inputs must have matching dimension")
    sq = float(((u - v) ** 2).sum())
    return float(np.exp(-sq / (2.0 * width * width)))


def kernel_matrix(inputs, width: float) -> np.ndarray:
    """Gram matrix of the RBF kernel; exactly symmetric with unit diagonal."""
    if width <= 0:
        raise ValueError("width must be positive")
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("inputs must be a non-empty (n, d) array")
    sq = cdist(x, x, metric="sqeuclidean")
    k = np.exp(-sq / (2.0 * width * width))
    k = 0.5 * (k + k.T)
    np.fill_diagonal(k, 1.0)
    return k


def cross_kernel_matrix(queries, inputs, width: float) -> np.ndarray:
    """(q, n) kernel block between query rows and training rows."""
    if width <= 0:
        raise ValueError("width must be positive")
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if q.shape[1] != x.shape[1]:
        raise ValueError("query dimension does not match training inputs")
    sq = cdist(q, x, metric="sqeuclidean")
    return np.exp(-sq / (2.0 * width * width))


def _checked_solve(a: np.ndarray, b: np.ndarray, context: str) -> np.ndarray:
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"{context}: matrix is singular ({exc})") from exc
    residual = float(np.abs(a @ x - b).max())
    scale = float(np.abs(a).max() * max(np.abs(x).max(), 1.0) + np.abs(b).max() + 1.0)
    if not np.isfinite(residual) or residual > 1e-6 * scale:
        raise SingularSystemError(
            f"{context}: unreliable solve, residual {residual:.3e} vs scale {scale:.3e}"
        )
    return x


def krr_fit(k: np.ndarray, y, ridge: float, jitter: float = DIAG_JITTER) -> np.ndarray:
    """Kernel ridge coefficients: argmin ||y - K a||^2 + ridge * a^T K a.

    Solves (K + ridge I) a = y with a small diagonal jitter added before
    factorization.
    """
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError("K must be square")
    if k.shape[0] != y.size:
        raise ValueError("K and y sizes differ")
    if not ridge > 0:
        raise ValueError("ridge must be positive")
    a = k + (ridge + jitter) * np.eye(k.shape[0])
    return _checked_solve(a, y, "krr_fit")


@dataclass
class KernelExpert:
    """Representer-form predictor f(q) = sum_n alpha_n k(q, x_n).

    When paired_symmetric is set, inputs hold an even count where row
    n + len/2 is the argument-swapped twin of row n with an identical
    coefficient; predictions then sum twin kernel values first, which makes
    swapped-argument queries agree to float round-off.
    """

    inputs: np.ndarray
    coefficients: np.ndarray
    hyperparams: ExpertHyperparams
    paired_symmetric: bool = False

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.coefficients = np.asarray(self.coefficients, dtype=float).ravel()
        if self.inputs.shape[0] != self.coefficients.size:
            raise ValueError("one coefficient per training input is required")
        if self.paired_symmetric and self.inputs.shape[0] % 2 != 0:
            raise ValueError("paired_symmetric requires an even input count")

    def predict_many(self, queries) -> np.ndarray:
        k = cross_kernel_matrix(queries, self.inputs, self.hyperparams.kernel_width)
        if self.paired_symmetric:
            half = self.inputs.shape[0] // 2
            return (k[:, :half] + k[:, half:]) @ self.coefficients[:half]
        return k @ self.coefficients

    def predict_one(self, query) -> float:
        return float(self.predict_many(np.asarray(query, dtype=float)[None, :])[0])


def expert_predict(expert: KernelExpert, query) -> float:
    """Evaluate a fitted expert at one paired input vector."""
    return expert.predict_one(query)


def joint_expert_solve(
    k_l: np.ndarray,
    k_p: np.ndarray,
    g,
    c_obs,
    lambda_l: float,
    lambda_p: float,
    jitter: float = DIAG_JITTER,
) -> tuple:
    """Closed-form joint fit of both experts at a fixed gating vector.

    Solves the stacked block stationarity system

        [(I-D)^2 K_p + lambda_p * sum(1-g) * I , (I-D) D K_l              ] [a_p]   [(I-D) c]
        [ D (I-D) K_p                          , D^2 K_l + lambda_l * sum(g) * I ] [a_l] = [ D c  ]

    with D = diag(g). When sum(g) = 0 (or sum(1-g) = 0) the starved
    expert's coefficients are zero and the surviving block is solved alone.

    Returns (alpha_l, alpha_p).
    """
    k_l = np.asarray(k_l, dtype=float)
    k_p = np.asarray(k_p, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    c = np.asarray(c_obs, dtype=float).ravel()
    n = c.size
    for name, mat in (("K_l", k_l), ("K_p", k_p)):
        if mat.shape != (n, n):
            raise ValueError(f"{name} must be ({n}, {n})")
    if g.size != n:
        raise ValueError("g and c_obs sizes differ")
    if np.any(g < -1e-9) or np.any(g > 1.0 + 1e-9):
        raise ValueError("g entries must lie in [0, 1]")
    if not (lambda_l > 0 and lambda_p > 0):
        raise ValueError("regularization weights must be positive")
    g = np.clip(g, 0.0, 1.0)

    sum_g = float(g.sum())
    sum_not_g = float(n - sum_g)
    eye = np.eye(n)

    if sum_g <= 0.0:
        a_p = _checked_solve(k_p + (lambda_p * sum_not_g + jitter) * eye, c, "joint_expert_solve")
        return np.zeros(n), a_p
    if sum_not_g <= 0.0:
        a_l = _checked_solve(k_l + (lambda_l * sum_g + jitter) * eye, c, "joint_expert_solve")
        return a_l, np.zeros(n)

    one_m_g = 1.0 - g
    top = np.hstack(
        [
            (one_m_g**2)[:, None] * k_p + lambda_p * sum_not_g * eye,
            (one_m_g * g)[:, None] * k_l,
        ]
    )
    bottom = np.hstack(
        [
            (g * one_m_g)[:, None] * k_p,
            (g**2)[:, None] * k_l + lambda_l * sum_g * eye,
        ]
    )
    system = np.vstack([top, bottom]) + jitter * np.eye(2 * n)
    rhs = np.concatenate([one_m_g * c, g * c])
    x = _checked_solve(system, rhs, "joint_expert_solve")
    return x[n:], x[:n]


def alternating_expert_solve(
    k_l: np.ndarray,
    k_p: np.ndarray,
    g,
    c_obs,
    lambda_l: float,
    lambda_p: float,
    tol: float = 1e-10,
    max_iters: int = 20_000,
    jitter: float = DIAG_JITTER,
) -> tuple:
    """Per-expert alternating solve run to a fixed point (cross-check path).

    Repeats the two single-expert stationarity solves until coefficients
    stop moving; at convergence it matches joint_expert_solve. Kept as an
    independent route for validation, not used by training.
    """
    k_l = np.asarray(k_l, dtype=float)
    k_p = np.asarray(k_p, dtype=float)
    g = np.clip(np.asarray(g, dtype=float).ravel(), 0.0, 1.0)
    c = np.asarray(c_obs, dtype=float).ravel()
    n = c.size
    sum_g = float(g.sum())
    sum_not_g = float(n - sum_g)
    one_m_g = 1.0 - g
    eye = np.eye(n)

    a_l = np.zeros(n)
    a_p = np.zeros(n)
    sys_l = (g**2)[:, None] * k_l + (lambda_l * sum_g + jitter) * eye
    sys_p = (one_m_g**2)[:, None] * k_p + (lambda_p * sum_not_g + jitter) * eye
    for _ in range(max_iters):
        a_l_prev, a_p_prev = a_l, a_p
        if sum_g > 0.0:
            rhs_l = g * (c - one_m_g * (k_p @ a_p))
            a_l = _checked_solve(sys_l, rhs_l, "alternating_expert_solve")
        if sum_not_g > 0.0:
            rhs_p = one_m_g * (c - g * (k_l @ a_l))
            a_p = _checked_solve(sys_p, rhs_p, "alternating_expert_solve")
        move = max(
            float(np.abs(a_l - a_l_prev).max(initial=0.0)),
            float(np.abs(a_p - a_p_prev).max(initial=0.0)),
        )
        if move <= tol * (1.0 + float(np.abs(a_l).max(initial=0.0)) + float(np.abs(a_p).max(initial=0.0))):
            return a_l, a_p
    raise SingularSystemError("alternating_expert_solve did not converge")
