"""Scikit-learn style wrappers around the lag-model estimators."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .estimators import METHODS, CoarsenedDataset, DmeConfig, fit_method, fit_ml
from .geometry import Partition
from .impacts import ImpactTriple, impacts_exact
from .point_process import CoarseningFlags
from .slm import KappaSpec, _factor, _system_matrix, build_weight_matrix

__all__ = ["SpatialLagRegressor", "CoarsenedSpatialLagRegressor", "check_coords"]


def check_coords(coords, n, allow_nan=False) -> np.ndarray:
    """Validate an ``(n, 2)`` coordinate array."""
    coords = check_array(coords, dtype=float, ensure_all_finite="allow-nan" if allow_nan else True)
    if coords.shape != (n, 2):
        raise ValueError(f"coords must have shape ({n}, 2), got {coords.shape}")
    return coords


class _LagPredictMixin:

    def _predict_from_W(self, X, W):
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        solve, _ = _factor(_system_matrix(W, self.rho_))
        return solve(X @ self.coef_)

    def predict(self, X, coords):
        """Reduced-form mean ``(I - rho W)^{-1} X beta`` on the given locations."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        coords = check_coords(coords, X.shape[0])
        W = build_weight_matrix(coords, self._kappa(), standardise=self._standardise())
        return self._predict_from_W(X, W)

    def impacts(self) -> ImpactTriple:
        """Average impacts evaluated on the training weight matrix."""
        check_is_fitted(self, "coef_")
        return impacts_exact(self.rho_, self.coef_, self.weights_)

    def _kappa(self):
        return KappaSpec.indicator(self.kappa_threshold)

    def _standardise(self):
        return True

    def _store(self, res, W, k):
        self.rho_ = float(res.rho)
        self.coef_ = np.asarray(res.beta, dtype=float)
        self.sigma2_ = float(res.sigma2)
        self.weights_ = W
        self.result_ = res
        self.n_features_in_ = k


class SpatialLagRegressor(_LagPredictMixin, RegressorMixin, BaseEstimator):
    """Maximum likelihood lag model with every location known.

    Parameters
    ----------
    kappa_threshold : float
        Units closer than this are neighbours.
    standardise : bool
        Row-standardise the weights.
    grid_points : int
        Coarse grid size for the concentrated likelihood search.

    Notes
    -----
    ``X`` should contain the intercept column if one is wanted.
    """

    def __init__(self, kappa_threshold=0.5, standardise=True, grid_points=81):
        self.kappa_threshold = kappa_threshold
        self.standardise = standardise
        self.grid_points = grid_points

    def _standardise(self):
        return self.standardise

    def fit(self, X, y, coords):
        X, y = check_X_y(X, y, dtype=float)
        coords = check_coords(coords, X.shape[0])
        W = build_weight_matrix(coords, self._kappa(), standardise=self.standardise)
        self._store(fit_ml(y, X, W, grid_points=self.grid_points), W, X.shape[1])
        return self


class CoarsenedSpatialLagRegressor(_LagPredictMixin, RegressorMixin, BaseEstimator):
    """Lag model fitted when some locations are only known up to a region.

    Parameters
    ----------
    partition : Partition
        Regions the coarsened units were reported in.
    method : {"DME", "SREM", "CIP", "REM"}
    kappa_threshold : float
    draws, population, elite_fraction, smoothing, max_iters, variance_tolerance,
    bandwidth :
        Cross-entropy and intensity settings, used by DME only.
    random_state : int or None

    ``fit`` takes coordinates with NaN rows for coarsened units and a region
    label for every unit. Labels of observed units may be -1, in which case
    they are located in ``partition``.
    """

    def __init__(
        self,
        partition: Partition | None = None,
        method="DME",
        kappa_threshold=0.5,
        draws=32,
        population=100,
        elite_fraction=0.1,
        smoothing=0.8,
        max_iters=100,
        variance_tolerance=0.005,
        bandwidth=None,
        random_state=None,
    ):
        self.partition = partition
        self.method = method
        self.kappa_threshold = kappa_threshold
        self.draws = draws
        self.population = population
        self.elite_fraction = elite_fraction
        self.smoothing = smoothing
        self.max_iters = max_iters
        self.variance_tolerance = variance_tolerance
        self.bandwidth = bandwidth
        self.random_state = random_state

    def _dme_config(self):
        return DmeConfig(
            draws=self.draws, population=self.population, elite_fraction=self.elite_fraction,
            smoothing=self.smoothing, max_iters=self.max_iters,
            variance_tolerance=self.variance_tolerance, bandwidth=self.bandwidth,
        )

    def fit(self, X, y, coords, regions=None):
        if self.partition is None:
            raise ValueError("a partition is required")
        method = str(self.method).upper()
        if method not in METHODS or method == "NCM":
            raise ValueError(f"method must be one of DME, SREM, CIP, REM; got {self.method!r}")
        X, y = check_X_y(X, y, dtype=float)
        n = X.shape[0]
        coords = check_coords(coords, n, allow_nan=True)
        observed = np.all(np.isfinite(coords), axis=1)
        if regions is None:
            labels = np.full(n, -1, dtype=np.int64)
        else:
            labels = np.asarray(regions, dtype=np.int64).ravel().copy()
            if labels.shape != (n,):
                raise ValueError(f"regions must have length {n}")
        if np.any(labels[~observed] < 0):
            raise ValueError("every coarsened unit needs a region label")
        fill = observed & (labels < 0)
        if fill.any():
            labels[fill] = self.partition.locate(coords[fill])
        data = CoarsenedDataset(y, X, coords, CoarseningFlags(observed, labels), self.partition)
        rng = np.random.default_rng(self.random_state)
        res = fit_method(method, data, self._kappa(), self._dme_config(), rng=rng)
        W = res.diagnostics.get("W")
        self.dataset_ = data
        self._store(res, W, X.shape[1])
        return self

    def impacts(self) -> ImpactTriple:
        check_is_fitted(self, "coef_")
        if self.weights_ is None:
            raise ValueError("DME impacts need simulated weights; use impacts_mc")
        return super().impacts()
