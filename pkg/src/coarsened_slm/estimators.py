"""Estimators of the spatial lag model under coarsened geocoding.

Five methods are provided:

* ``NCM``  maximum likelihood with every true location (simulation oracle);
* ``REM``  maximum likelihood on observed units, unstandardised weights;
* ``SREM`` maximum likelihood on observed units, row-standardised weights;
* ``CIP``  maximum likelihood with coarsened units placed at region centroids;
* ``DME``  the doubly marginalised estimator: the likelihood of the observed
  responses, averaged over coarsened locations drawn from a coarsened-data
  intensity estimate, maximised by the cross-entropy method.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .geometry import Partition
from .point_process import (
    CoarseningFlags,
    IntensityField,
    estimate_intensity,
    estimate_propensity,
    sample_conditional_locations,
)
from .slm import (
    KappaSpec,
    MarginalLikelihood,
    SingularSystemError,
    SlmParams,
    WeightMatrix,
    build_weight_matrix,
)

__all__ = [
    "METHODS",
    "CoarsenedDataset",
    "DmeConfig",
    "EstimateResult",
    "OptimisationError",
    "fit_ml",
    "fit_ncm",
    "fit_rem",
    "fit_srem",
    "fit_cip",
    "fit_dme",
    "fit_method",
    "mc_marginal_loglik",
    "coarsened_intensity",
]

METHODS = ("NCM", "DME", "SREM", "CIP", "REM")


class OptimisationError(RuntimeError):
    """The likelihood maximiser did not find an interior optimum."""


@dataclass(frozen=True, eq=False)
class CoarsenedDataset:
    """Responses, design and the spatial information that survived geocoding.

    ``coords`` holds exact locations for observed units; rows of coarsened
    units are ignored (NaN in real data). ``true_coords`` is only known in
    simulations and is required by the NCM oracle.
    """

    y: np.ndarray
    X: np.ndarray
    coords: np.ndarray
    flags: CoarseningFlags
    partition: Partition
    true_coords: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        n = len(y)
        if X.shape[0] != n or len(coords) != n or self.flags.n != n:
            raise ValueError("y, X, coords and flags must describe the same units")
        if not np.all(np.isfinite(coords[self.flags.observed])):
            raise ValueError("observed units need finite coordinates")
        if np.any(self.flags.regions >= self.partition.n_regions):
            raise ValueError("region label out of range for the partition")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "coords", coords)
        if self.true_coords is not None:
            object.__setattr__(
                self, "true_coords", np.asarray(self.true_coords, dtype=float).reshape(-1, 2)
            )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.flags.observed

    @property
    def observed_coords(self) -> np.ndarray:
        return self.coords[self.flags.observed]


@dataclass(frozen=True)
class DmeConfig:
    """Cross-entropy settings for the doubly marginalised estimator."""

    draws: int = 32
    population: int = 100
    elite_fraction: float = 0.1
    smoothing: float = 0.8
    max_iters: int = 100
    variance_tolerance: float = 0.005
    init_sd: float = 0.5
    bandwidth: float | None = None
    grid: tuple[int, int] = (128, 128)
    seed: int | None = None

    def __post_init__(self):
        if not 0 < self.elite_fraction < 1:
            raise ValueError("elite_fraction must lie in (0, 1)")
        if not 0 < self.smoothing <= 1:
            raise ValueError("smoothing must lie in (0, 1]")
        if self.draws < 1 or self.population < 2 or self.max_iters < 1:
            raise ValueError("draws, population and max_iters must be positive")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.elite_fraction * self.population)))


@dataclass
class EstimateResult:
    params: SlmParams
    method: str
    converged: bool = True
    iterations: int = 0
    objective: float = float("nan")
    seconds: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def rho(self) -> float:
        return self.params.rho

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    @property
    def sigma2(self) -> float:
        return self.params.sigma2


# ----------------------------------------------------------------------------
# concentrated maximum likelihood


def _ols(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def fit_ml(y, X, W: WeightMatrix, grid_points: int = 81) -> EstimateResult:
    """Maximum likelihood for the lag model with ``beta`` and ``sigma2`` profiled out.

    For fixed ``rho`` the coefficients are the least-squares fit of
    ``(I - rho W) y`` on ``X`` and ``sigma2`` the mean squared residual. The
    remaining one-dimensional objective is scanned on a grid over the
    admissible interval and refined with bounded Brent search.
    """
    start = time.perf_counter()
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    n = len(y)
    if W.n != n or X.shape[0] != n:
        raise ValueError("y, X and W disagree on the number of units")
    b0 = _ols(X, y)
    e0 = y - X @ b0
    if W.nnz == 0:
        params = SlmParams(0.0, b0, e0 @ e0 / n)
        return EstimateResult(params, "ML", objective=_concentrated(0.0, e0, e0 * 0, W, n),
                              seconds=time.perf_counter() - start,
                              diagnostics={"flat": True})
    Wy = np.asarray(W.dot(y)).ravel()
    bL = _ols(X, Wy)
    eL = Wy - X @ bL

    lo, hi = W.admissible_interval
    if not np.isfinite(lo):
        lo = -1.0 / max(np.abs(W.eigenvalues).max(), 1e-12)
    if not np.isfinite(hi):
        hi = 1.0 / max(np.abs(W.eigenvalues).max(), 1e-12)
    eps = 1e-6 * (hi - lo)
    lo, hi = lo + eps, hi - eps

    def negll(r):
        return -_concentrated(r, e0, eL, W, n)

    grid = np.linspace(lo, hi, grid_points)
    vals = np.array([negll(r) for r in grid])
    j = int(np.argmin(vals))
    if j == 0 or j == grid_points - 1:
        raise OptimisationError(
            f"concentrated likelihood peaks at the boundary rho={grid[j]:.6g} "
            f"of the admissible interval ({lo:.6g}, {hi:.6g})"
        )
    res = minimize_scalar(negll, bounds=(grid[j - 1], grid[j + 1]), method="bounded",
                          options={"xatol": 1e-10})
    rho = float(res.x) if res.fun <= vals[j] else float(grid[j])
    beta = b0 - rho * bL
    e = e0 - rho * eL
    params = SlmParams(rho, beta, e @ e / n)
    return EstimateResult(
        params,
        "ML",
        converged=bool(res.success),
        iterations=int(res.nfev) + grid_points,
        objective=-negll(rho),
        seconds=time.perf_counter() - start,
        diagnostics={"interval": (lo, hi)},
    )


def _concentrated(rho, e0, eL, W, n):
    e = e0 - rho * eL
    s2 = e @ e / n
    return -0.5 * n * (math.log(2 * math.pi * s2) + 1.0) + W.log_abs_det(rho)


def _finish(res: EstimateResult, method: str, start: float, **diag) -> EstimateResult:
    res.method = method
    res.seconds = time.perf_counter() - start
    res.diagnostics.update(diag)
    return res


def fit_ncm(dataset: CoarsenedDataset, kappa: KappaSpec) -> EstimateResult:
    """Oracle fit with every unit at its true location."""
    start = time.perf_counter()
    if dataset.true_coords is None:
        raise ValueError("NCM needs the true coordinates of every unit")
    W = build_weight_matrix(dataset.true_coords, kappa, standardise=True)
    return _finish(fit_ml(dataset.y, dataset.X, W), "NCM", start, W=W)


def _restricted(dataset: CoarsenedDataset, kappa: KappaSpec, standardise: bool, tag: str):
    start = time.perf_counter()
    obs = dataset.observed
    if not obs.any():
        raise ValueError(f"{tag} needs at least one observed unit")
    W = build_weight_matrix(dataset.coords[obs], kappa, standardise=standardise)
    return _finish(fit_ml(dataset.y[obs], dataset.X[obs], W), tag, start, W=W)


def fit_rem(dataset: CoarsenedDataset, kappa: KappaSpec) -> EstimateResult:
    """Observed units only, raw kernel weights."""
    return _restricted(dataset, kappa, False, "REM")


def fit_srem(dataset: CoarsenedDataset, kappa: KappaSpec) -> EstimateResult:
    """Observed units only, row-standardised weights."""
    return _restricted(dataset, kappa, True, "SREM")


def cip_coordinates(dataset: CoarsenedDataset) -> np.ndarray:
    coords = dataset.coords.copy()
    C = dataset.flags.coarsened_index
    coords[C] = dataset.partition.centroids[dataset.flags.regions[C]]
    return coords


def fit_cip(dataset: CoarsenedDataset, kappa: KappaSpec) -> EstimateResult:
    """All units, coarsened ones imputed to their region's centroid."""
    start = time.perf_counter()
    W = build_weight_matrix(cip_coordinates(dataset), kappa, standardise=True)
    return _finish(fit_ml(dataset.y, dataset.X, W), "CIP", start, W=W)


# ----------------------------------------------------------------------------
# doubly marginalised estimator


def coarsened_intensity(
    dataset: CoarsenedDataset, bandwidth: float | None = None, grid=(128, 128)
) -> IntensityField:
    """Propensity-weighted kernel intensity from the observed units."""
    obs = dataset.observed
    prop = estimate_propensity(dataset.flags, dataset.partition.n_regions)
    field_ = estimate_intensity(
        dataset.coords[obs], dataset.flags.regions[obs], prop, dataset.partition.window,
        bandwidth=bandwidth, grid=grid,
    )
    field_.meta["propensity"] = [float(v) for v in prop.values]
    return field_


class _DrawSet:
    """Marginal likelihood evaluators for a batch of coarsened-location draws."""

    def __init__(self, dataset, field_, kappa, n_draws, rng, jitter=True):
        obs = dataset.observed
        C = dataset.flags.coarsened_index
        y_P = dataset.y[obs]
        coords = dataset.coords.copy()
        self.evaluators = []
        self.locations = []
        if len(C) == 0:
            W = build_weight_matrix(coords, kappa, standardise=True)
            self.evaluators.append(MarginalLikelihood(W, obs, dataset.X, y_P))
            return
        labels = dataset.flags.regions[C]
        draws = sample_conditional_locations(
            field_, np.tile(labels, n_draws), dataset.partition, rng, jitter=jitter
        ).reshape(n_draws, len(C), 2)
        for zc in draws:
            coords[C] = zc
            W = build_weight_matrix(coords, kappa, standardise=True)
            self.evaluators.append(MarginalLikelihood(W, obs, dataset.X, y_P))
            self.locations.append(zc.copy())

    def score(self, rho, beta, sigma2) -> np.ndarray:
        """Log of the draw-averaged likelihood for each candidate."""
        rows = []
        for ev in self.evaluators:
            try:
                rows.append(ev(rho, beta, sigma2))
            except SingularSystemError:
                rows.append(np.full(len(np.atleast_1d(rho)), -np.inf))
        ll = np.vstack(rows)
        if not np.isfinite(ll).any(axis=0).all():
            bad = ~np.isfinite(ll).any(axis=0)
            out = np.full(ll.shape[1], -np.inf)
            good = ~bad
            out[good] = logsumexp(ll[:, good], axis=0) - math.log(len(rows))
            return out
        return logsumexp(ll, axis=0) - math.log(len(rows))


def mc_marginal_loglik(
    params: SlmParams,
    dataset: CoarsenedDataset,
    field_: IntensityField,
    kappa: KappaSpec,
    n_draws: int,
    rng,
    jitter: bool = True,
) -> float:
    """Monte Carlo estimate of the log marginal likelihood of the observed responses.

    Averages the likelihood (not the log-likelihood) over ``n_draws`` joint
    draws of the coarsened locations, accumulated as a log-mean-exp.
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    draws = _DrawSet(dataset, field_, kappa, n_draws, rng, jitter=jitter)
    val = draws.score([params.rho], [params.beta], [params.sigma2])[0]
    if not np.isfinite(val):
        raise SingularSystemError("every location draw produced a singular system")
    return float(val)


def _to_theta(params: SlmParams) -> np.ndarray:
    rho = float(np.clip(params.rho, -0.999, 0.999))
    return np.concatenate([[math.atanh(rho)], params.beta, [0.5 * math.log(params.sigma2)]])


def _from_theta(theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    theta = np.atleast_2d(theta)
    return np.tanh(theta[:, 0]), theta[:, 1:-1], np.exp(2.0 * theta[:, -1])


def fit_dme(
    dataset: CoarsenedDataset,
    kappa: KappaSpec,
    config: DmeConfig = DmeConfig(),
    rng=None,
    init: SlmParams | None = None,
    field_: IntensityField | None = None,
) -> EstimateResult:
    """Doubly marginalised estimator fitted by the cross-entropy method.

    The instrumental distribution is a product of Gaussians over
    ``(atanh rho, beta, log sigma)``. Each iteration draws fresh coarsened
    locations shared by every candidate, keeps the elite fraction of the
    population by Monte Carlo marginal likelihood, and moves the instrumental
    means and standard deviations toward the elite moments.
    """
    start = time.perf_counter()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if not dataset.observed.any():
        raise ValueError("DME needs at least one observed unit")
    has_coarsened = dataset.flags.p < dataset.n
    if field_ is None and has_coarsened:
        field_ = coarsened_intensity(dataset, config.bandwidth, config.grid)
    if init is None:
        init = fit_srem(dataset, kappa).params
    mean = _to_theta(init)
    sd = np.full_like(mean, config.init_sd)
    d = len(mean)
    alpha = config.smoothing
    n_elite = config.n_elite

    fixed = None if has_coarsened else _DrawSet(dataset, field_, kappa, 1, rng)
    best_theta, best_val = mean.copy(), -np.inf
    elite_history = []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        draws = fixed or _DrawSet(dataset, field_, kappa, config.draws, rng)
        cand = mean + sd * rng.standard_normal((config.population, d))
        rho, beta, s2 = _from_theta(cand)
        vals = draws.score(rho, beta, s2)
        order = np.argsort(-vals, kind="stable")
        elite = cand[order[:n_elite]]
        elite_history.append(float(np.mean(vals[order[:n_elite]])))
        if vals[order[0]] > best_val:
            best_val, best_theta = float(vals[order[0]]), cand[order[0]].copy()
        mean = alpha * elite.mean(axis=0) + (1 - alpha) * mean
        sd = alpha * elite.std(axis=0) + (1 - alpha) * sd
        if np.all(sd < config.variance_tolerance):
            converged = True
            break
    theta = mean if converged else best_theta
    rho, beta, s2 = _from_theta(theta)
    params = SlmParams(float(rho[0]), beta[0], float(s2[0]))
    return EstimateResult(
        params,
        "DME",
        converged=converged,
        iterations=it,
        objective=elite_history[-1],
        seconds=time.perf_counter() - start,
        diagnostics={"elite_history": elite_history, "final_sd": sd, "field": field_,
                     "init": init},
    )


def fit_method(method: str, dataset: CoarsenedDataset, kappa: KappaSpec,
               config: DmeConfig = DmeConfig(), rng=None, init=None) -> EstimateResult:
    method = method.upper()
    if method == "NCM":
        return fit_ncm(dataset, kappa)
    if method == "REM":
        return fit_rem(dataset, kappa)
    if method == "SREM":
        return fit_srem(dataset, kappa)
    if method == "CIP":
        return fit_cip(dataset, kappa)
    if method == "DME":
        return fit_dme(dataset, kappa, config, rng=rng, init=init)
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
