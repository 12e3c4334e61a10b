"""LASSO objective, soft-thresholding, and the ISTA / FISTA baselines."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError

DEFAULT_ALPHA = 0.1


@dataclass
class LassoProblem:
    X: np.ndarray
    y: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DomainError(f"inconsistent shapes X{self.X.shape}, y{self.y.shape}")
        if self.alpha < 0:
            raise DomainError("alpha must be >= 0")

    @classmethod
    def from_instance(cls, inst, alpha: float = DEFAULT_ALPHA) -> "LassoProblem":
        return cls(inst.X, inst.y, alpha)


@dataclass
class SolverTrace:
    """Iterates ``betas[0..K]`` (``betas[0]`` is the initializer) plus diagnostics."""

    betas: np.ndarray
    objectives: np.ndarray | None = None
    errors_to_truth: np.ndarray | None = None
    wall_time: float = 0.0

    @property
    def final(self) -> np.ndarray:
        return self.betas[-1]

    @property
    def K(self) -> int:
        return len(self.betas) - 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "objective", "err_l2"])
        for k in range(len(self.betas)):
            obj = "" if self.objectives is None else repr(float(self.objectives[k]))
            err = "" if self.errors_to_truth is None else repr(float(self.errors_to_truth[k]))
            writer.writerow([k + 1, obj, err])
        return buf.getvalue()


def soft_threshold(x, theta):
    """Proximal map of ``theta * ||.||_1``: sign(x) * max(|x| - theta, 0)."""
    if np.any(np.asarray(theta) < 0):
        raise DomainError("soft-threshold level must be >= 0")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


def lasso_objective(beta, problem: LassoProblem) -> float:
    r = problem.y - problem.X @ beta
    return 0.5 * float(r @ r) + problem.alpha * float(np.abs(beta).sum())


def spectral_norm_sq(X, rtol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of ``X^T X`` by power iteration from the all-ones vector."""
    X = np.asarray(X, dtype=float)
    if not np.any(X):
        raise DomainError("spectral_norm_sq needs a nonzero matrix")
    # the smaller Gram matrix has the same nonzero spectrum
    A = X @ X.T if X.shape[0] < X.shape[1] else X.T @ X
    n = A.shape[0]
    starts = [np.ones(n), np.cos(np.arange(1, n + 1) * 1.2345)]
    residual = np.inf
    for v in starts:
        v = v / np.linalg.norm(v)
        Av = A @ v
        if np.linalg.norm(Av) <= 1e-14 * np.abs(A).max():
            continue  # start lies in the null space
        lam = float(v @ Av)
        for _ in range(max_iter):
            v = Av / np.linalg.norm(Av)
            Av = A @ v
            lam_new = float(v @ Av)
            residual = float(np.linalg.norm(Av - lam_new * v))
            if residual <= rtol * lam_new or abs(lam_new - lam) <= 1e-15 * lam_new:
                return lam_new
            lam = lam_new
        raise NumericError(f"power iteration did not converge in {max_iter} steps",
                           residual=residual)
    raise NumericError("power iteration start vectors annihilated by X^T X", residual=residual)


def _finish(betas, problem, beta_star, t0) -> SolverTrace:
    betas = np.asarray(betas)
    objectives = np.array([lasso_objective(b, problem) for b in betas])
    errors = None
    if beta_star is not None:
        errors = np.linalg.norm(betas - np.asarray(beta_star), axis=1)
    return SolverTrace(betas, objectives, errors, time.perf_counter() - t0)


def ista_solve(problem: LassoProblem, K: int, beta_star=None, L: float | None = None) -> SolverTrace:
    if K < 1:
        raise DomainError("K must be >= 1")
    t0 = time.perf_counter()
    X, y = problem.X, problem.y
    L = spectral_norm_sq(X) if L is None else L
    beta = np.zeros(X.shape[1])
    betas = [beta]
    for _ in range(K):
        beta = soft_threshold(beta - X.T @ (X @ beta - y) / L, problem.alpha / L)
        betas.append(beta)
    return _finish(betas, problem, beta_star, t0)


def fista_solve(problem: LassoProblem, K: int, beta_star=None, L: float | None = None) -> SolverTrace:
    if K < 1:
        raise DomainError("K must be >= 1")
    t0 = time.perf_counter()
    X, y = problem.X, problem.y
    L = spectral_norm_sq(X) if L is None else L
    beta = np.zeros(X.shape[1])
    z = beta
    t = 1.0
    betas = [beta]
    for _ in range(K):
        beta_next = soft_threshold(z - X.T @ (X @ z - y) / L, problem.alpha / L)
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z = beta_next + ((t - 1.0) / t_next) * (beta_next - beta)
        beta, t = beta_next, t_next
        betas.append(beta)
    return _finish(betas, problem, beta_star, t0)


def lasso_optimality_gap(beta, problem: LassoProblem) -> float:
    """Largest violation of the LASSO subgradient optimality condition at ``beta``."""
    g = problem.X.T @ (problem.X @ beta - problem.y)
    active = beta != 0
    viol_active = np.abs(g[active] + problem.alpha * np.sign(beta[active]))
    viol_zero = np.maximum(np.abs(g[~active]) - problem.alpha, 0.0)
    return float(max(viol_active.max(initial=0.0), viol_zero.max(initial=0.0)))
