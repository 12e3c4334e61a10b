import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from icl_lista.classical import (LassoProblem, fista_solve, ista_solve, lasso_objective,
                                 lasso_optimality_gap, soft_threshold, spectral_norm_sq)
from icl_lista.errors import DomainError, NumericError
from icl_lista.instances import InstanceConfig, sample_instance


def jacobi_eigenvalues(A, sweeps=100):
    """Cyclic Jacobi rotations; independent of LAPACK and of power iteration."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(A**2) - np.sum(np.diag(A) ** 2))
        if off < 1e-14 * np.abs(A).max():
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) <= 1e-18 * np.abs(A).max():
                    continue
                tau = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau)) if tau != 0 else 1.0
                c = 1 / np.sqrt(1 + t * t)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
    return np.diag(A)


def grid_lasso_minimizer(X, y, alpha, lo=-3.0, hi=3.0, step=1e-3):
    grid = np.arange(lo, hi + step / 2, step)
    best, arg = np.inf, None
    for b0 in np.array_split(grid, 60):
        B0, B1 = np.meshgrid(b0, grid, indexing="ij")
        r = y[:, None, None] - X[:, 0, None, None] * B0 - X[:, 1, None, None] * B1
        f = 0.5 * np.sum(r * r, axis=0) + alpha * (np.abs(B0) + np.abs(B1))
        i = np.unravel_index(np.argmin(f), f.shape)
        if f[i] < best:
            best, arg = f[i], np.array([B0[i], B1[i]])
    return arg


# -- soft threshold ---------------------------------------------------------------

def test_soft_threshold_literal():
    np.testing.assert_allclose(soft_threshold(np.array([1.2, -0.3, 0.0]), 0.5), [0.7, 0.0, 0.0])


def test_soft_threshold_identity_and_dominating_threshold(rng):
    x = rng.standard_normal(10)
    np.testing.assert_array_equal(soft_threshold(x, 0.0), x)
    assert not soft_threshold(x, np.abs(x).max()).any()


def test_soft_threshold_negative_rejected():
    with pytest.raises(DomainError):
        soft_threshold(np.ones(3), -0.1)


_vec = arrays(np.float64, 8, elements=st.floats(-50, 50))


@settings(max_examples=100, deadline=None)
@given(x=_vec, z=_vec, theta=st.floats(0, 10))
def test_soft_threshold_is_nonexpansive(x, z, theta):
    sx, sz = soft_threshold(x, theta), soft_threshold(z, theta)
    assert np.linalg.norm(sx - sz) <= np.linalg.norm(x - z) + 1e-12
    assert np.linalg.norm(sx) <= np.linalg.norm(x) + 1e-12


# -- objective ----------------------------------------------------------------------

def test_objective_at_zero_and_exact_fit(rng):
    X = rng.standard_normal((5, 3))
    y = rng.standard_normal(5)
    assert lasso_objective(np.zeros(3), LassoProblem(X, y, 0.3)) == pytest.approx(0.5 * y @ y)
    beta = rng.standard_normal(3)
    assert lasso_objective(beta, LassoProblem(X, X @ beta, 0.0)) == pytest.approx(0.0, abs=1e-20)


def test_objective_matches_loop_formula(rng):
    X = rng.standard_normal((7, 4))
    y = rng.standard_normal(7)
    beta = rng.standard_normal(4)
    alpha = 0.37
    total = 0.0
    for i in range(7):
        r = y[i] - sum(X[i, j] * beta[j] for j in range(4))
        total += 0.5 * r * r
    total += alpha * sum(abs(b) for b in beta)
    assert abs(lasso_objective(beta, LassoProblem(X, y, alpha)) - total) <= 1e-12


def test_problem_validation():
    with pytest.raises(DomainError):
        LassoProblem(np.ones((3, 2)), np.ones(2))
    with pytest.raises(DomainError):
        LassoProblem(np.ones((3, 2)), np.ones(3), alpha=-1)


# -- spectral norm -------------------------------------------------------------------

def test_spectral_norm_orthonormal_rows(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 4)))
    assert spectral_norm_sq(Q.T) == pytest.approx(1.0, rel=1e-8)


def test_spectral_norm_rank_one(rng):
    u = rng.standard_normal(9)
    u /= np.linalg.norm(u)
    assert spectral_norm_sq(3.5 * u[None, :]) == pytest.approx(3.5**2, rel=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_norm_matches_jacobi(seed):
    X = np.random.default_rng(seed).standard_normal((10, 20))
    ref = jacobi_eigenvalues(X.T @ X).max()
    assert spectral_norm_sq(X) == pytest.approx(ref, rel=1e-8)


def test_spectral_norm_handles_all_ones_in_null_space():
    X = np.array([[1.0, -1.0, 0.0], [0.0, 0.0, 0.0]])
    assert spectral_norm_sq(X) == pytest.approx(2.0, rel=1e-8)


def test_spectral_norm_errors():
    with pytest.raises(DomainError):
        spectral_norm_sq(np.zeros((3, 3)))
    X = np.diag([1.0, 1.0 - 1e-9, 0.5])
    with pytest.raises(NumericError) as exc:
        spectral_norm_sq(X @ np.array([[1, 1, 1], [0, 1, 1], [0, 0, 1.0]]), rtol=1e-16, max_iter=3)
    assert exc.value.residual is not None


# -- ISTA / FISTA ----------------------------------------------------------------------

def test_ista_first_step(rng):
    X = rng.standard_normal((6, 4))
    y = rng.standard_normal(6)
    p = LassoProblem(X, y, 0.2)
    L = spectral_norm_sq(X)
    tr = ista_solve(p, 1)
    np.testing.assert_allclose(tr.betas[1], soft_threshold(X.T @ y / L, 0.2 / L), atol=1e-15)
    assert not tr.betas[0].any()


def test_ista_orthonormal_columns_fixed_point(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((8, 3)))
    y = rng.standard_normal(8)
    tr = ista_solve(LassoProblem(Q, y, 0.1), 5, L=1.0)
    target = soft_threshold(Q.T @ y, 0.1)
    for k in range(1, 6):
        np.testing.assert_allclose(tr.betas[k], target, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_ista_objective_monotone(seed):
    inst = sample_instance(InstanceConfig(), seed)
    tr = ista_solve(LassoProblem.from_instance(inst), 200)
    assert np.all(np.diff(tr.objectives) <= 1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_grid_search_oracle_d2(seed):
    rng = np.random.default_rng(100 + seed)
    X = rng.standard_normal((3, 2))
    y = X @ np.array([1.0, -0.5]) + 0.1 * rng.standard_normal(3)
    p = LassoProblem(X, y, 0.1)
    ref = grid_lasso_minimizer(X, y, 0.1)
    ista = ista_solve(p, 500).final
    fista = fista_solve(p, 500).final
    assert np.abs(ista - ref).max() <= 1e-3
    assert np.abs(fista - ref).max() <= 1e-3


def test_fista_least_squares_orthonormal(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((10, 4)))
    y = rng.standard_normal(10)
    tr = fista_solve(LassoProblem(Q, y, 0.0), 50)
    resid = Q.T @ (Q @ tr.final - y)
    assert np.linalg.norm(resid) < 1e-8
    np.testing.assert_allclose(tr.final, Q.T @ y, atol=1e-8)


def test_fista_first_iterate_equals_ista(rng):
    inst = sample_instance(InstanceConfig(), 3)
    p = LassoProblem.from_instance(inst)
    np.testing.assert_array_equal(fista_solve(p, 1).betas[1], ista_solve(p, 1).betas[1])


@pytest.mark.parametrize("solver", [ista_solve, fista_solve])
def test_converged_iterates_satisfy_optimality(solver):
    rng = np.random.default_rng(5)
    X = rng.standard_normal((30, 8))
    y = X @ np.r_[1.0, -2.0, np.zeros(6)] + 0.05 * rng.standard_normal(30)
    p = LassoProblem(X, y, 0.5)
    beta = solver(p, 3000).final
    assert lasso_optimality_gap(beta, p) <= 1e-6


def test_trace_metadata_and_csv(desk_instance):
    tr = ista_solve(LassoProblem.from_instance(desk_instance), 4, beta_star=desk_instance.beta_star)
    assert tr.K == 4 and tr.betas.shape == (5, 20)
    assert tr.errors_to_truth[0] == pytest.approx(np.linalg.norm(desk_instance.beta_star))
    lines = tr.to_csv().splitlines()
    assert lines[0] == "k,objective,err_l2" and len(lines) == 6
    assert tr.wall_time >= 0


def test_k_validated(desk_instance):
    p = LassoProblem.from_instance(desk_instance)
    with pytest.raises(DomainError):
        ista_solve(p, 0)
    with pytest.raises(DomainError):
        fista_solve(p, 0)
