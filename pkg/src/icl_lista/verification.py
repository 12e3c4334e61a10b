"""Numerical certificates for the LISTA-VM / Transformer claims.

Checks here are pure functions returning small report objects; the
``VerificationLog`` collects them into CSV plus a plain PASS/FAIL summary.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .classical import SolverTrace
from .errors import DomainError
from .learned import (ListaVmParams, _stack, _unroll, flatten, grad_unrolled, lista_vm_forward,
                      lista_vm_ss_forward, loss_value, unflatten)
from .transformer import build_constructed_weights, embed_instance, extract_beta, forward

NUMERIC_FLOOR = 1e-12
KINK_MARGIN = 1e-4


# -- equivalence ------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    max_abs: float     # max |beta_TF - beta_VM| over (k, n, coordinate)
    max_scaled: float  # same, divided by max(1, ||beta_VM^(k)||_inf) per (k, n)
    peak: float        # largest |beta_VM| met
    K: int
    N: int
    B: float

    @property
    def deviation(self) -> float:
        return self.max_abs


def check_equivalence(inst, K: int, gamma, theta_schedule, B: float | None = None,
                      sigma_d: float = 1.0, M_V=None) -> EquivalenceReport:
    """Run the constructed Transformer and LISTA-VM on every prefix and compare iterates."""
    d = inst.d
    weights = build_constructed_weights(d, K, gamma, sigma_d, theta_schedule, B=B, M_V=M_V)
    states = forward(weights, embed_instance(inst).H)
    M = weights.gamma[:, None, None] * weights.M_V
    params = ListaVmParams(M, np.asarray(theta_schedule, dtype=float))
    max_abs = max_scaled = peak = 0.0
    for n in range(1, inst.n + 1):
        trace = lista_vm_forward(params, inst.X[:n], inst.y[:n])
        for k in range(K + 1):
            ref = trace.betas[k]
            gap = float(np.max(np.abs(extract_beta(states[k], n, d) - ref)))
            size = float(np.max(np.abs(ref)))
            max_abs = max(max_abs, gap)
            max_scaled = max(max_scaled, gap / max(1.0, size))
            peak = max(peak, size)
    return EquivalenceReport(max_abs, max_scaled, peak, K, inst.n, weights.B)


# -- coherence and the contraction condition ---------------------------------------

@dataclass
class CoherenceStats:
    sigma_min: float        # min over the support of D_i^T X_i
    sigma_max_diag: float   # max over the support of D_i^T X_i
    mu_offdiag: float       # max_{i != j} |D_i^T X_j|
    n: int
    diag_min_all: float = 0.0  # signed min / max of D_i^T X_i over every coordinate
    diag_max_all: float = 0.0


def coherence_stats(X_prefix, M_V, m: float | None = None, support=None) -> CoherenceStats:
    """Statistics of ``D_n^T X`` with ``D_n = (1/m) X (M^V)^T``."""
    X = np.asarray(X_prefix, dtype=float)
    n, d = X.shape
    if n < 1:
        raise DomainError("need at least one row")
    m = 2 * n + 1 if m is None else m
    G = (X @ np.asarray(M_V, dtype=float).T / m).T @ X
    diag = np.diag(G).copy()
    off = np.abs(G - np.diag(diag))
    mu = float(off.max()) if d > 1 else 0.0
    supp = np.arange(d) if support is None else np.asarray(support, dtype=int)
    ds = np.abs(diag[supp])
    return CoherenceStats(float(ds.min()), float(ds.max()), mu, n,
                          float(diag.min()), float(diag.max()))


@dataclass
class ConditionReport:
    lhs: float
    passes: bool
    implied_rate: float  # c2 = -log(lhs), capped when lhs = 0
    per_coordinate_ok: bool = True


RATE_CAP = -math.log(np.finfo(float).tiny)


def check_condition(stats: CoherenceStats, gamma: float, S: int) -> ConditionReport:
    """``gamma (2S-1) mu + |1 - gamma sigma_min| <= 1`` plus ``0 <= gamma D_i^T X_i <= 1``."""
    lhs = gamma * (2 * S - 1) * stats.mu_offdiag + abs(1.0 - gamma * stats.sigma_min)
    per_coord = gamma * stats.diag_min_all >= 0.0 and gamma * stats.diag_max_all <= 1.0
    rate = RATE_CAP if lhs <= 0 else -math.log(lhs)
    return ConditionReport(lhs, bool(lhs <= 1.0 and per_coord), min(rate, RATE_CAP), per_coord)


def contraction_violations(trace: SolverTrace, beta_star, lhs: float, theta, S: int,
                           slack: float = 1e-12) -> list[int]:
    """Layers ``k`` where ``||e_{k+1}||_1 <= lhs ||e_k||_1 + S theta_k`` fails."""
    e = np.abs(trace.betas - np.asarray(beta_star)).sum(axis=1)
    bad = []
    for k, th in enumerate(np.asarray(theta)):
        bound = lhs * e[k] + S * th
        if e[k + 1] > bound + slack * max(1.0, bound):
            bad.append(k)
    return bad


# -- convergence rate --------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    r2: float
    floor_k: int | None  # first index at or below the numeric floor
    points: int
    degenerate: bool = False


def convergence_rate(trace, beta_star=None, floor: float = NUMERIC_FLOOR) -> RateFit:
    """Least-squares fit of ``log err_k`` against ``k`` up to the numeric floor.

    ``trace`` is a ``SolverTrace`` (errors taken against ``beta_star``) or a
    plain array of errors.
    """
    if isinstance(trace, SolverTrace):
        if beta_star is None:
            raise DomainError("beta_star required with a SolverTrace")
        err = np.linalg.norm(trace.betas - np.asarray(beta_star), axis=1)
    else:
        err = np.asarray(trace, dtype=float)
    at_floor = np.flatnonzero(err <= floor)
    floor_k = int(at_floor[0]) if at_floor.size else None
    k = np.arange(len(err) if floor_k is None else floor_k)
    if k.size < 4:
        return RateFit(float("nan"), float("nan"), floor_k, int(k.size), degenerate=True)
    logs = np.log(err[k])
    slope, icpt = np.polyfit(k, logs, 1)
    resid = logs - (slope * k + icpt)
    total = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 if total == 0 else 1.0 - float(np.sum(resid**2)) / total
    return RateFit(float(slope), r2, floor_k, int(k.size))


# -- gradients -----------------------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    inconclusive: bool
    attempts: int
    coordinates: int


def kink_distance(kind, params, batch, support=None) -> float:
    """Smallest ``||u| - theta_k|`` over all layers and instances."""
    X, y, _ = _stack(batch, support if kind == "lista_vm_ss" else None)
    m = 2 * X.shape[1] + 1
    _, cache = _unroll(kind, params, X, y, m)
    return float(min(np.min(np.abs(np.abs(u) - params.theta[k])) for k, (u, _, _) in enumerate(cache)))


def finite_diff_check(kind, params, batch, h: float = 1e-5, support=None, sampler=None,
                      max_resamples: int = 10, coords=None) -> GradCheck:
    """Central differences against ``grad_unrolled``.

    If the batch sits within ``1e-4`` of a soft-threshold kink, ``sampler(attempt)``
    supplies a fresh batch (up to ``max_resamples`` times); otherwise, or when
    all attempts fail, the result is flagged inconclusive. The error of each
    coordinate is ``|fd - g| / max(|g|, |fd|, 1e-3 * ||g||_inf)``, so entries that
    are round-off sized relative to the gradient do not dominate. Thresholds
    closer than ``h`` to zero sit on the domain boundary and are skipped.
    """
    attempts = 0
    while kink_distance(kind, params, batch, support) < KINK_MARGIN:
        if sampler is None or attempts >= max_resamples:
            return GradCheck(float("nan"), True, attempts, 0)
        attempts += 1
        batch = sampler(attempts)
    grads, _ = grad_unrolled(kind, params, batch, support=support)
    g = flatten(grads)
    base = flatten(params)
    idx = np.arange(base.size) if coords is None else np.asarray(coords)
    theta_start = base.size - params.K  # thresholds are the last block of flatten()
    on_boundary = (idx >= theta_start) & (base[np.minimum(idx, base.size - 1)] < h)
    idx = idx[~on_boundary]
    fd = np.empty(idx.size)
    for t, i in enumerate(idx):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        fd[t] = (loss_value(kind, unflatten(params, plus), batch, support=support)
                 - loss_value(kind, unflatten(params, minus), batch, support=support)) / (2 * h)
    gi = g[idx]
    scale = max(float(np.max(np.abs(g))), np.finfo(float).tiny)
    denom = np.maximum(np.maximum(np.abs(gi), np.abs(fd)), 1e-3 * scale)
    return GradCheck(float(np.max(np.abs(fd - gi) / denom)), False, attempts, int(idx.size))


# -- support selection -------------------------------------------------------------------

@dataclass
class SupportReport:
    err_vm: float
    err_ss: float
    ratio: float          # err_ss / err_vm
    off_support_zero: bool


def support_variant_check(inst, params: ListaVmParams, support) -> SupportReport:
    """Same parameters, with and without restricting the measurement columns."""
    vm = lista_vm_forward(params, inst.X, inst.y, beta_star=inst.beta_star)
    ss = lista_vm_ss_forward(params, support, inst.X, inst.y, beta_star=inst.beta_star)
    outside = np.ones(inst.d, dtype=bool)
    outside[np.asarray(support, dtype=int)] = False
    zero = bool(np.all(ss.betas[:, outside] == 0.0))
    e_vm, e_ss = float(vm.errors_to_truth[-1]), float(ss.errors_to_truth[-1])
    ratio = 1.0 if e_vm == e_ss else (e_ss / e_vm if e_vm > 0 else float("inf"))
    return SupportReport(e_vm, e_ss, ratio, zero)


# -- reporting ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass
class VerificationLog:
    results: list[CheckResult] = field(default_factory=list)

    def add(self, name, passed, value, threshold, detail="") -> CheckResult:
        res = CheckResult(name, bool(passed), float(value), float(threshold), detail)
        self.results.append(res)
        return res

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "status", "value", "threshold", "detail"])
        for r in self.results:
            w.writerow([r.name, "PASS" if r.passed else "FAIL", repr(r.value), repr(r.threshold),
                        r.detail])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.6g} (threshold {r.threshold:.6g})"
                 + (f" {r.detail}" if r.detail else "") for r in self.results]
        return "\n".join(lines)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)
