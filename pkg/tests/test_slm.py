import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coarsened_slm.geometry import default_window
from coarsened_slm.point_process import default_intensity, simulate_fixed_n
from coarsened_slm.slm import (
    KappaSpec,
    MarginalLikelihood,
    SingularSystemError,
    SlmParams,
    WeightMatrix,
    build_weight_matrix,
    log_lik_full,
    log_lik_marginal,
    marginal_moments,
    schur_inverse_blocks,
    simulate_slm,
    split_blocks,
)

K05 = KappaSpec.indicator(0.5)


def random_W(rng, n, density=0.4, standardise=True):
    B = (rng.random((n, n)) < density).astype(float)
    B = np.triu(B, 1)
    B = B + B.T
    if standardise:
        s = B.sum(1)
        B = np.where(s[:, None] > 0, B / np.where(s > 0, s, 1)[:, None], 0.0)
    return WeightMatrix(B, standardise, None)


def test_two_points_single_neighbour():
    W = build_weight_matrix(np.array([[0, 0], [0.3, 0]]), K05)
    np.testing.assert_array_equal(W.toarray(), [[0, 1], [1, 0]])


def test_isolated_point_zero_row():
    W = build_weight_matrix(np.array([[0, 0], [0.3, 0], [5, 5]]), K05)
    np.testing.assert_array_equal(W.toarray()[2], 0)


def test_collinear_middle_row():
    W = build_weight_matrix(np.array([[0, 0], [0.3, 0], [0.6, 0]]), K05)
    np.testing.assert_allclose(W.toarray()[1], [0.5, 0, 0.5])


def test_unstandardised_is_raw_indicator():
    W = build_weight_matrix(np.array([[0, 0], [0.3, 0], [0.6, 0]]), K05, standardise=False)
    np.testing.assert_array_equal(W.toarray(), [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_function_kernel():
    kappa = KappaSpec.from_function(lambda d: np.exp(-d))
    W = build_weight_matrix(np.array([[0, 0], [1, 0]]), kappa, standardise=False)
    assert W.toarray()[0, 1] == pytest.approx(math.exp(-1))


def test_sparse_above_threshold():
    pts = simulate_fixed_n(default_intensity(), default_window(), 250, np.random.default_rng(0))
    W = build_weight_matrix(pts, K05)
    assert W.is_sparse
    small = build_weight_matrix(pts[:20], K05)
    assert not small.is_sparse


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 80), st.integers(0, 10**6), st.booleans())
def test_weight_invariants(n, seed, standardise):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 3, (n, 2))
    W = build_weight_matrix(pts, K05, standardise)
    M = W.toarray()
    assert np.all(np.diag(M) == 0) and np.all(M >= 0)
    if standardise:
        s = M.sum(1)
        assert np.all((np.abs(s - 1) < 1e-12) | (s == 0))
    else:
        np.testing.assert_array_equal(M, M.T)


def test_log_abs_det_matches_lu():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 4, (90, 2))
    for st_ in (True, False):
        W = build_weight_matrix(pts, K05, st_)
        lo, hi = W.admissible_interval
        for rho in (0.8 * lo if np.isfinite(lo) else -0.5, 0.3 * hi if np.isfinite(hi) else 0.3):
            A = np.eye(90) - rho * W.toarray()
            expected = np.linalg.slogdet(A)[1]
            assert W.log_abs_det(rho) == pytest.approx(expected, abs=1e-9)


def test_standardised_spectral_radius_and_nonsingular():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = rng.integers(2, 25)
        pts = rng.uniform(0, 2, (n, 2))
        W = build_weight_matrix(pts, K05)
        assert np.max(np.abs(W.eigenvalues)) <= 1 + 1e-10
        rho = rng.uniform(-0.99, 0.99)
        assert np.isfinite(W.log_abs_det(rho))


def test_simulate_rho_zero_is_regression():
    rng = np.random.default_rng(3)
    n = 10000
    pts = rng.uniform(0, 50, (n, 2))
    W = build_weight_matrix(pts, K05)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    beta = np.array([1.0, 2.0, -1.0])
    y = simulate_slm(W, X, SlmParams(0.0, beta, 1.0), rng)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ X)))
    assert np.all(np.abs(coef - beta) < 3 * se)


def test_simulate_tiny_sigma_is_solve():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 3, (40, 2))
    W = build_weight_matrix(pts, K05)
    X = rng.standard_normal((40, 2))
    beta = np.array([1.0, 0.5])
    y = simulate_slm(W, X, SlmParams(0.6, beta, 1e-30), rng)
    expected = np.linalg.solve(np.eye(40) - 0.6 * W.toarray(), X @ beta)
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_simulate_mean_matches_dense_solve():
    rng = np.random.default_rng(5)
    n = 50
    pts = rng.uniform(0, 3, (n, 2))
    W = build_weight_matrix(pts, K05)
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    par = SlmParams(0.5, [1.0, 1.0], 1.0)
    Y = np.array([simulate_slm(W, X, par, rng) for _ in range(10000)])
    A_inv = np.linalg.inv(np.eye(n) - 0.5 * W.toarray())
    mean = A_inv @ X @ par.beta
    se = np.sqrt(np.diag(A_inv @ A_inv.T) / 10000)
    assert np.all(np.abs(Y.mean(0) - mean) < 4 * se)


def test_simulate_singular():
    W = WeightMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), True, None)
    with pytest.raises(SingularSystemError):
        simulate_slm(W, np.ones((2, 1)), SlmParams(1.0, [1.0], 1.0), np.random.default_rng(0))


def test_split_all_observed():
    rng = np.random.default_rng(6)
    W = random_W(rng, 6)
    sysm = split_blocks(W, np.ones(6, bool), 0.3)
    np.testing.assert_array_equal(sysm.W_PP, W.toarray())
    assert sysm.W_CC.shape == (0, 0) and sysm.W_PC.shape == (6, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_split_reassembly(n, seed):
    rng = np.random.default_rng(seed)
    W = random_W(rng, n)
    obs = rng.random(n) < 0.5
    rho = rng.uniform(-0.9, 0.9)
    s = split_blocks(W, obs, rho)
    perm = np.eye(n)[s.order]
    np.testing.assert_array_equal(perm.T @ s.permuted() @ perm, W.toarray())
    A = perm @ (np.eye(n) - rho * W.toarray()) @ perm.T
    p = s.p
    np.testing.assert_allclose(s.A_PP, A[:p, :p], atol=1e-15)
    np.testing.assert_allclose(s.A_PC, A[:p, p:], atol=1e-15)
    np.testing.assert_allclose(s.A_CP, A[p:, :p], atol=1e-15)
    np.testing.assert_allclose(s.A_CC, A[p:, p:], atol=1e-15)
    # stable order
    assert list(s.P) == sorted(s.P) and list(s.C) == sorted(s.C)


def test_schur_rho_zero_identity():
    rng = np.random.default_rng(7)
    W = random_W(rng, 7)
    obs = np.array([1, 0, 1, 1, 0, 0, 1], bool)
    pp, pc, cp, cc = schur_inverse_blocks(split_blocks(W, obs, 0.0))
    np.testing.assert_array_equal(pp, np.eye(4))
    np.testing.assert_array_equal(cc, np.eye(3))
    assert not pc.any() and not cp.any()


def test_schur_block_diagonal():
    rng = np.random.default_rng(8)
    M = np.zeros((6, 6))
    M[:3, :3] = random_W(rng, 3, 0.9).toarray()
    M[3:, 3:] = random_W(rng, 3, 0.9).toarray()
    s = split_blocks(M, np.array([1, 1, 1, 0, 0, 0], bool), 0.4)
    pp, pc, cp, cc = schur_inverse_blocks(s)
    np.testing.assert_allclose(pp, np.linalg.inv(s.A_PP), atol=1e-12)
    np.testing.assert_allclose(cc, np.linalg.inv(s.A_CC), atol=1e-12)


def test_schur_random_8x8():
    rng = np.random.default_rng(9)
    W = random_W(rng, 8)
    obs = rng.random(8) < 0.5
    s = split_blocks(W, obs, 0.4)
    A = np.block([[s.A_PP, s.A_PC], [s.A_CP, s.A_CC]])
    inv = np.linalg.inv(A)
    p = s.p
    for got, want in zip(schur_inverse_blocks(s), (inv[:p, :p], inv[:p, p:], inv[p:, :p], inv[p:, p:])):
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_schur_singular_block_named():
    W = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], float)
    s = split_blocks(W, np.array([0, 0, 1], bool), 1.0)
    with pytest.raises(SingularSystemError, match="A_CC"):
        schur_inverse_blocks(s)


def test_moments_no_coarsening():
    rng = np.random.default_rng(10)
    W = random_W(rng, 9)
    X = rng.standard_normal((9, 2))
    par = SlmParams(0.4, [1.0, -0.5], 2.0)
    mean, cov = marginal_moments(par, split_blocks(W, np.ones(9, bool), 0.4), X)
    A = np.eye(9) - 0.4 * W.toarray()
    np.testing.assert_allclose(mean, np.linalg.solve(A, X @ par.beta), atol=1e-12)
    np.testing.assert_allclose(cov, 2.0 * np.linalg.inv(A.T @ A), atol=1e-12)


def test_moments_rho_zero():
    rng = np.random.default_rng(11)
    W = random_W(rng, 9)
    X = rng.standard_normal((9, 2))
    obs = rng.random(9) < 0.6
    par = SlmParams(0.0, [1.0, -0.5], 1.5)
    mean, cov = marginal_moments(par, split_blocks(W, obs, 0.0), X)
    np.testing.assert_allclose(mean, X[obs] @ par.beta, atol=1e-14)
    np.testing.assert_allclose(cov, 1.5 * np.eye(obs.sum()), atol=1e-14)


def test_moments_match_joint_block():
    rng = np.random.default_rng(12)
    n, p = 12, 7
    W = random_W(rng, n)
    obs = np.zeros(n, bool)
    obs[rng.choice(n, p, replace=False)] = True
    X = rng.standard_normal((n, 3))
    par = SlmParams(0.6, [0.5, 1.0, -1.0], 1.3)
    mean, cov = marginal_moments(par, split_blocks(W, obs, 0.6), X)
    A_inv = np.linalg.inv(np.eye(n) - 0.6 * W.toarray())
    np.testing.assert_allclose(mean, (A_inv @ X @ par.beta)[obs], atol=1e-10)
    np.testing.assert_allclose(cov, 1.3 * (A_inv @ A_inv.T)[np.ix_(obs, obs)], atol=1e-10)
    np.testing.assert_array_equal(cov, cov.T)


def test_loglik_marginal_full_consistency():
    rng = np.random.default_rng(13)
    W = random_W(rng, 10)
    X = rng.standard_normal((10, 2))
    y = rng.standard_normal(10)
    par = SlmParams(0.35, [0.2, 0.7], 0.8)
    a = log_lik_marginal(par, y, X, split_blocks(W, np.ones(10, bool), 0.35))
    assert a == pytest.approx(log_lik_full(par, y, X, W), abs=1e-8)


def test_loglik_marginal_rho_zero():
    rng = np.random.default_rng(14)
    W = random_W(rng, 10)
    X = rng.standard_normal((10, 2))
    y = rng.standard_normal(10)
    obs = rng.random(10) < 0.5
    par = SlmParams(0.0, [0.2, 0.7], 0.8)
    a = log_lik_marginal(par, y[obs], X, split_blocks(W, obs, 0.0))
    b = stats.norm.logpdf(y[obs] - X[obs] @ par.beta, scale=math.sqrt(0.8)).sum()
    assert a == pytest.approx(b, abs=1e-10)


def test_loglik_marginal_dense_quadratic_oracle():
    rng = np.random.default_rng(15)
    n = 9
    W = random_W(rng, n)
    X = rng.standard_normal((n, 2))
    obs = np.array([1, 1, 0, 1, 0, 1, 1, 0, 1], bool)
    y = rng.standard_normal(n)
    par = SlmParams(-0.4, [0.3, 1.1], 1.7)
    A_inv = np.linalg.inv(np.eye(n) - par.rho * W.toarray())
    m = (A_inv @ X @ par.beta)[obs]
    S = par.sigma2 * (A_inv @ A_inv.T)[np.ix_(obs, obs)]
    r = y[obs] - m
    expected = -0.5 * (obs.sum() * math.log(2 * math.pi) + np.linalg.slogdet(S)[1] + r @ np.linalg.inv(S) @ r)
    got = log_lik_marginal(par, y[obs], X, split_blocks(W, obs, par.rho))
    assert got == pytest.approx(expected, abs=1e-9)


def test_loglik_full_rho_zero_and_permutation():
    rng = np.random.default_rng(16)
    n = 8
    W = random_W(rng, n)
    X = rng.standard_normal((n, 2))
    y = rng.standard_normal(n)
    par0 = SlmParams(0.0, [1.0, 0.5], 0.9)
    expected = stats.norm.logpdf(y - X @ par0.beta, scale=math.sqrt(0.9)).sum()
    assert log_lik_full(par0, y, X, W) == pytest.approx(expected, abs=1e-10)
    par = SlmParams(0.45, [1.0, 0.5], 0.9)
    perm = rng.permutation(n)
    Wp = WeightMatrix(W.toarray()[np.ix_(perm, perm)], True, None)
    assert log_lik_full(par, y[perm], X[perm], Wp) == pytest.approx(log_lik_full(par, y, X, W), abs=1e-10)


def test_loglik_full_two_unit_logdet():
    W = WeightMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), True, None)
    y = np.zeros(2)
    X = np.zeros((2, 1))
    par = SlmParams(0.5, [0.0], 1.0)
    base = -math.log(2 * math.pi)
    assert log_lik_full(par, y, X, W) - base == pytest.approx(math.log(1 - 0.25), abs=1e-14)


def test_loglik_full_prefers_truth():
    rng = np.random.default_rng(17)
    n = 250
    pts = simulate_fixed_n(default_intensity(), default_window(), n, rng)
    W = build_weight_matrix(pts, K05)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    par = SlmParams(0.5, [1, 1, -1], 1.0)
    alt = SlmParams(min(0.5 + 0.2, 0.99), [1, 1, -1], 1.0)
    wins = 0
    for _ in range(200):
        y = simulate_slm(W, X, par, rng)
        wins += log_lik_full(par, y, X, W) > log_lik_full(alt, y, X, W)
    assert wins >= 190


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 14), st.integers(0, 10**6))
def test_batched_marginal_matches_moment_route(n, seed):
    rng = np.random.default_rng(seed)
    W = random_W(rng, n)
    obs = rng.random(n) < 0.6
    if not obs.any():
        obs[0] = True
    X = rng.standard_normal((n, 2))
    y = rng.standard_normal(n)
    rho = rng.uniform(-0.9, 0.9, 3)
    beta = rng.standard_normal((3, 2))
    s2 = rng.uniform(0.3, 2, 3)
    ml = MarginalLikelihood(W, obs, X, y[obs])
    got = ml(rho, beta, s2)
    for k in range(3):
        par = SlmParams(rho[k], beta[k], s2[k])
        want = log_lik_marginal(par, y[obs], X, split_blocks(W, obs, rho[k]))
        assert got[k] == pytest.approx(want, abs=1e-8)


def test_sparse_and_dense_agree():
    rng = np.random.default_rng(18)
    pts = rng.uniform(0, 5, (100, 2))
    W = build_weight_matrix(pts, K05)
    Wd = WeightMatrix(W.toarray(), True, W.raw.toarray())
    assert sp.issparse(W.matrix)
    X = rng.standard_normal((100, 2))
    y = rng.standard_normal(100)
    par = SlmParams(0.3, [1, 1], 1.0)
    assert log_lik_full(par, y, X, W) == pytest.approx(log_lik_full(par, y, X, Wd), abs=1e-9)
