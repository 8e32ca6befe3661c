"""Spatial lag model algebra: weights, simulation, block inverses, likelihoods.

Model: ``y = rho W y + X beta + eps`` with ``eps ~ N(0, sigma2 I)``. Units are
split into observed (P) and coarsened (C) blocks; the distribution of ``y_P``
with ``y_C`` integrated out follows from the Schur-complement form of
``(I - rho W)^{-1}``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform

__all__ = [
    "KappaSpec",
    "WeightMatrix",
    "SlmParams",
    "BlockSystem",
    "SingularSystemError",
    "build_weight_matrix",
    "simulate_slm",
    "split_blocks",
    "schur_inverse_blocks",
    "marginal_moments",
    "log_lik_marginal",
    "log_lik_full",
    "log_abs_det",
    "MarginalLikelihood",
]

DENSE_BELOW = 64
LOG_2PI = math.log(2.0 * math.pi)


class SingularSystemError(np.linalg.LinAlgError):
    """A matrix that must be inverted or factorised is (numerically) singular."""


@dataclass(frozen=True)
class KappaSpec:
    """Non-increasing distance kernel.

    Either an indicator ``1{d <= threshold}`` or any vectorised callable.
    """

    kind: str = "indicator"
    threshold: float | None = 0.5
    func: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == "indicator":
            if self.threshold is None or not self.threshold > 0:
                raise ValueError("indicator kernel needs a positive threshold")
        elif self.kind == "function":
            if not callable(self.func):
                raise ValueError("function kernel needs a callable")
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    @classmethod
    def indicator(cls, threshold: float) -> "KappaSpec":
        return cls("indicator", float(threshold))

    @classmethod
    def from_function(cls, func: Callable) -> "KappaSpec":
        return cls("function", None, func)

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        if self.kind == "indicator":
            return (d <= self.threshold).astype(float)
        return np.asarray(self.func(d), dtype=float)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Spatial weights with zero diagonal.

    ``raw`` holds the symmetric kernel values ``kappa(|z_i - z_j|)``; ``matrix``
    is ``raw`` itself or its row-standardised version. Rows whose kernel sum is
    zero stay identically zero.
    """

    matrix: sp.csr_matrix | np.ndarray
    standardised: bool
    raw: sp.csr_matrix | np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    @property
    def nnz(self) -> int:
        if self.is_sparse:
            return int(self.matrix.nnz)
        return int(np.count_nonzero(self.matrix))

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.array(self.matrix)

    def dot(self, v):
        return self.matrix @ v

    @functools.cached_property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``matrix``; real when built from a symmetric kernel."""
        if self.raw is None:
            return np.linalg.eigvals(self.toarray())
        B = self.raw.toarray() if sp.issparse(self.raw) else np.asarray(self.raw)
        if not self.standardised:
            return np.linalg.eigvalsh(B)
        d = B.sum(axis=1)
        s = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 1.0)
        return np.linalg.eigvalsh(s[:, None] * B * s[None, :])

    def log_abs_det(self, rho) -> np.ndarray | float:
        """``log|det(I - rho W)|`` through the spectrum; vectorised over ``rho``."""
        lam = self.eigenvalues
        r = np.asarray(rho, dtype=float)
        out = np.log(np.abs(1.0 - r[..., None] * lam)).sum(axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    @functools.cached_property
    def admissible_interval(self) -> tuple[float, float]:
        """Open interval of ``rho`` keeping ``I - rho W`` nonsingular around 0."""
        if self.standardised:
            return -1.0, 1.0
        lam = self.eigenvalues
        real = np.real(lam[np.abs(np.imag(lam)) < 1e-9])
        lo = real.min() if real.size else 0.0
        hi = real.max() if real.size else 0.0
        left = 1.0 / lo if lo < -1e-12 else -np.inf
        right = 1.0 / hi if hi > 1e-12 else np.inf
        return float(left), float(right)

    def to_coo_rows(self):
        """Nonzero entries as ``(i, j, w)`` triples sorted by row then column."""
        M = sp.coo_matrix(self.matrix)
        order = np.lexsort((M.col, M.row))
        return zip(M.row[order], M.col[order], M.data[order])


def build_weight_matrix(points, kappa: KappaSpec, standardise: bool = True) -> WeightMatrix:
    """Kernel weights between all pairs of points, optionally row-standardised."""
    pts = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    n = len(pts)
    if n < 1:
        raise ValueError("need at least one point")
    if kappa.kind == "indicator":
        pairs = cKDTree(pts).query_pairs(kappa.threshold, output_type="ndarray")
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        raw = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        if n < DENSE_BELOW:
            raw = raw.toarray()
    else:
        raw = squareform(kappa(pdist(pts))) if n > 1 else np.zeros((1, 1))
        np.fill_diagonal(raw, 0.0)
        if np.any(raw < 0):
            raise ValueError("kernel values must be nonnegative")
    if not standardise:
        return WeightMatrix(raw, False, raw)
    sums = np.asarray(raw.sum(axis=1)).ravel()
    inv = np.where(sums > 0, 1.0 / np.where(sums > 0, sums, 1.0), 0.0)
    if sp.issparse(raw):
        mat = sp.diags(inv) @ raw
        mat = sp.csr_matrix(mat)
    else:
        mat = raw * inv[:, None]
    return WeightMatrix(mat, True, raw)


@dataclass(frozen=True)
class SlmParams:
    rho: float
    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


def _system_matrix(W: WeightMatrix, rho: float):
    n = W.n
    if W.is_sparse:
        return sp.csc_matrix(sp.identity(n) - rho * W.matrix)
    return np.eye(n) - rho * W.toarray()


def _factor(A, name: str = "I - rho W"):
    """LU factorisation with a singularity check; returns (solve, log|det|)."""
    if sp.issparse(A):
        try:
            lu = splu(sp.csc_matrix(A))
        except RuntimeError as exc:
            raise SingularSystemError(f"{name} is singular") from exc
        diag = lu.U.diagonal()
        solve = lu.solve
    else:
        A = np.asarray(A, dtype=float)
        if A.size == 0:
            return (lambda b: np.asarray(b, dtype=float)), 0.0
        lu, piv = sla.lu_factor(A, check_finite=False)
        diag = np.diag(lu)
        solve = functools.partial(_lu_solve, (lu, piv))
    scale = max(np.abs(diag).max(), 1.0)
    if np.abs(diag).min() <= 1e-13 * scale * len(diag):
        raise SingularSystemError(f"{name} is singular")
    return solve, float(np.log(np.abs(diag)).sum())


def _lu_solve(fac, b):
    return sla.lu_solve(fac, b, check_finite=False)


def log_abs_det(A) -> float:
    """``log|det A|`` from an LU factorisation."""
    return _factor(A)[1]


def simulate_slm(W: WeightMatrix, X, params: SlmParams, rng) -> np.ndarray:
    """Draw ``y = (I - rho W)^{-1} (X beta + eps)`` by a linear solve."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] != W.n:
        raise ValueError("X and W disagree on the number of units")
    eps = rng.normal(0.0, params.sigma, W.n)
    solve, _ = _factor(_system_matrix(W, params.rho))
    return solve(X @ params.beta + eps)


# ----------------------------------------------------------------------------
# block system


@dataclass(frozen=True, eq=False)
class BlockSystem:
    """Observed-first permutation of ``W`` and the blocks of ``A = I - rho W``."""

    P: np.ndarray
    C: np.ndarray
    W_PP: np.ndarray
    W_PC: np.ndarray
    W_CP: np.ndarray
    W_CC: np.ndarray
    rho: float

    @property
    def p(self) -> int:
        return len(self.P)

    @property
    def n(self) -> int:
        return len(self.P) + len(self.C)

    @property
    def order(self) -> np.ndarray:
        return np.concatenate([self.P, self.C])

    @property
    def A_PP(self):
        return np.eye(self.p) - self.rho * self.W_PP

    @property
    def A_PC(self):
        return -self.rho * self.W_PC

    @property
    def A_CP(self):
        return -self.rho * self.W_CP

    @property
    def A_CC(self):
        return np.eye(len(self.C)) - self.rho * self.W_CC

    def permuted(self) -> np.ndarray:
        """Reassembled ``P_Phi W P_Phi^T``."""
        return np.block([[self.W_PP, self.W_PC], [self.W_CP, self.W_CC]])


def split_blocks(W: WeightMatrix | np.ndarray, observed, rho: float) -> BlockSystem:
    """Stable observed-first split of ``W`` for the given geocoding flags."""
    obs = np.asarray(getattr(observed, "observed", observed), dtype=bool)
    M = W.toarray() if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    if len(obs) != M.shape[0]:
        raise ValueError("flags and W disagree on the number of units")
    P = np.flatnonzero(obs)
    C = np.flatnonzero(~obs)
    return BlockSystem(
        P, C, M[np.ix_(P, P)], M[np.ix_(P, C)], M[np.ix_(C, P)], M[np.ix_(C, C)], float(rho)
    )


def _dense_factor(M, name):
    M = np.asarray(M, dtype=float)
    try:
        lu, piv = sla.lu_factor(M, check_finite=False)
    except ValueError as exc:
        raise SingularSystemError(f"{name} is singular") from exc
    diag = np.abs(np.diag(lu))
    if diag.size and diag.min() <= 1e-13 * max(diag.max(), 1.0) * len(diag):
        raise SingularSystemError(f"{name} is singular")
    return lu, piv


def _schur_parts(system: BlockSystem):
    """Factorisations of ``A_CC`` and ``Xi = A_PP - A_PC A_CC^{-1} A_CP``."""
    if len(system.C) == 0:
        cc = None
        xi = system.A_PP
    else:
        cc = _dense_factor(system.A_CC, "A_CC")
        xi = system.A_PP - system.A_PC @ sla.lu_solve(cc, system.A_CP)
    xi_fac = _dense_factor(xi, "Schur complement Xi") if system.p else None
    return cc, xi_fac


def schur_inverse_blocks(system: BlockSystem):
    """Blocks ``((A^-1)_PP, (A^-1)_PC, (A^-1)_CP, (A^-1)_CC)`` via the Schur
    complement of ``A_CC``; only ``A_CC`` and ``Xi`` are factorised."""
    p, c = system.p, len(system.C)
    cc, xi = _schur_parts(system)
    inv_pp = sla.lu_solve(xi, np.eye(p)) if p else np.zeros((0, 0))
    if c == 0:
        return inv_pp, np.zeros((p, 0)), np.zeros((0, p)), np.zeros((0, 0))
    acc_inv_acp = sla.lu_solve(cc, system.A_CP)  # A_CC^-1 A_CP
    apc_acc_inv = sla.lu_solve(cc, system.A_PC.T, trans=1).T  # A_PC A_CC^-1
    inv_pc = -inv_pp @ apc_acc_inv
    inv_cp = -acc_inv_acp @ inv_pp
    inv_cc = sla.lu_solve(cc, np.eye(c)) + acc_inv_acp @ inv_pp @ apc_acc_inv
    return inv_pp, inv_pc, inv_cp, inv_cc


def marginal_moments(params: SlmParams, system: BlockSystem, X):
    """Mean and covariance of ``y_P`` with the coarsened responses integrated out."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] != system.n:
        raise ValueError("X must have one row per unit (original order)")
    rho, beta = system.rho, params.beta
    XPb = X[system.P] @ beta
    cc, xi = _schur_parts(system)
    if len(system.C) == 0:
        mean = sla.lu_solve(xi, XPb)
        G = np.zeros((system.p, 0))
    else:
        XCb = X[system.C] @ beta
        mean = sla.lu_solve(xi, XPb + rho * system.W_PC @ sla.lu_solve(cc, XCb))
        G = sla.lu_solve(cc, system.W_PC.T, trans=1).T  # W_PC A_CC^-1
    inner = np.eye(system.p) + rho**2 * (G @ G.T)
    xi_inv_inner = sla.lu_solve(xi, inner)
    cov = params.sigma2 * sla.lu_solve(xi, xi_inv_inner.T).T
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def log_lik_marginal(params: SlmParams, y_P, X, system: BlockSystem) -> float:
    """Gaussian log-density of ``y_P`` at its marginal moments."""
    y_P = np.asarray(y_P, dtype=float).ravel()
    if len(y_P) != system.p:
        raise ValueError("y_P must have one entry per observed unit")
    if system.p == 0:
        return 0.0
    mean, cov = marginal_moments(params, system, X)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("marginal covariance is not positive definite") from exc
    z = sla.solve_triangular(L, y_P - mean, lower=True)
    return float(-0.5 * system.p * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * z @ z)


def log_lik_full(params: SlmParams, y, X, W: WeightMatrix) -> float:
    """Exact SLM log-likelihood with the Jacobian from an LU factorisation."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    n = len(y)
    A = _system_matrix(W, params.rho)
    _, logdet = _factor(A)
    resid = A @ y - X @ params.beta
    return float(
        -0.5 * n * (LOG_2PI + math.log(params.sigma2))
        + logdet
        - 0.5 * resid @ resid / params.sigma2
    )


# ----------------------------------------------------------------------------
# batched marginal likelihood


class MarginalLikelihood:
    """Batched log-density of ``y_P`` for one weight matrix.

    Integrating ``y_C`` out of the joint density gives

        log p(y_P) = -p/2 log(2 pi s2) + log|det A| - ||r*||^2 / (2 s2)
                     - 1/2 log det(A_C^T A_C)

    where ``A_C`` are the coarsened columns of ``A = I - rho W`` and ``r*`` is
    the residual ``A y - X beta`` minimised over ``y_C``. This equals
    :func:`log_lik_marginal` but only needs the spectrum of ``W`` and one
    ``(n-p)``-square Cholesky per candidate, so many parameter vectors can be
    scored against the same ``W``.
    """

    def __init__(self, W: WeightMatrix, observed, X, y_P):
        obs = np.asarray(getattr(observed, "observed", observed), dtype=bool)
        self.W = W
        self.P = np.flatnonzero(obs)
        self.C = np.flatnonzero(~obs)
        self.X = np.asarray(X, dtype=float)
        n = W.n
        u = np.zeros(n)
        u[self.P] = np.asarray(y_P, dtype=float).ravel()
        self.u = u
        self.Wu = np.asarray(W.dot(u)).ravel()
        M = W.matrix
        if len(self.C):
            WC = M[:, self.C]
            WC = WC.toarray() if sp.issparse(WC) else np.asarray(WC)
            self.WC = WC  # n x (n-p)
            WCC = WC[self.C]
            self.S1 = WCC + WCC.T
            self.S2 = WC.T @ WC
        else:
            self.WC = np.zeros((n, 0))

    def __call__(self, rho, beta, sigma2) -> np.ndarray:
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
        K = len(rho)
        p, c = len(self.P), len(self.C)
        # a = A_P y_P - X beta, one column per candidate
        a = self.u[:, None] - rho[None, :] * self.Wu[:, None] - self.X @ beta.T
        quad = np.einsum("nk,nk->k", a, a)
        logdet_A = self.W.log_abs_det(rho)
        logdet_Q = np.zeros(K)
        if c:
            b = a[self.C] - rho[None, :] * (self.WC.T @ a)  # A_C^T a
            Q = (
                np.eye(c)[None]
                - rho[:, None, None] * self.S1[None]
                + (rho**2)[:, None, None] * self.S2[None]
            )
            try:
                L = np.linalg.cholesky(Q)
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError("A_C^T A_C is not positive definite") from exc
            z = np.linalg.solve(L, b.T[:, :, None])[:, :, 0]
            quad = quad - np.einsum("kc,kc->k", z, z)
            logdet_Q = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        return (
            -0.5 * p * (LOG_2PI + np.log(sigma2))
            + logdet_A
            - 0.5 * quad / sigma2
            - 0.5 * logdet_Q
        )
