"""Monte Carlo study of the estimators over the eight coarsening scenarios."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq

from .estimators import (
    METHODS,
    CoarsenedDataset,
    DmeConfig,
    coarsened_intensity,
    fit_cip,
    fit_dme,
    fit_ncm,
    fit_rem,
    fit_srem,
)
from .geometry import DEFAULT_WINDOW_VERTICES, Partition, Window, build_hex_partition
from .impacts import impacts_exact, impacts_mc
from .point_process import (
    CoarseningFlags,
    GaussianBumpIntensity,
    apply_coarsening,
    default_intensity,
    intensity_from_dict,
    simulate_fixed_n,
)
from .slm import KappaSpec, SlmParams, build_weight_matrix, simulate_slm

__all__ = [
    "CoarseningSpec",
    "ScenarioConfig",
    "MetricsTable",
    "SkipRateError",
    "SCALES",
    "scenario_catalog",
    "get_scenario",
    "relative_metrics",
    "run_scenario",
    "make_shared",
    "simulate_replication",
]

IMPACT_REGRESSOR = 1
MAX_SKIP_RATE = 0.2

SCALES = {
    "desk": {"replications": 50, "population": 60, "draws": 16, "impact_draws": 16},
    "paper": {"replications": 300, "population": 100, "draws": 32, "impact_draws": 32},
}


class SkipRateError(RuntimeError):
    """Too many replications failed for some (method, quantity) cell."""

    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


@dataclass(frozen=True)
class CoarseningSpec:
    """How coarsening probabilities are assigned to units.

    ``kind="constant"`` coarsens every unit with probability ``prob``.
    ``kind="intensity"`` makes the probability an affine function of the true
    intensity (increasing for ``sign=+1``, decreasing for ``sign=-1``), clipped
    to ``[low, high]`` and calibrated to average ``mean`` over the pattern.
    """

    kind: str = "constant"
    prob: float = 0.4
    sign: int = 1
    low: float = 0.2
    high: float = 0.75
    mean: float = 0.4

    def coarsening_probs(self, lam_at_points) -> np.ndarray:
        lam = np.asarray(lam_at_points, dtype=float)
        if self.kind == "constant":
            return np.full(len(lam), self.prob)
        if self.kind != "intensity":
            raise ValueError(f"unknown coarsening kind {self.kind!r}")
        return _calibrated_affine(self.sign * lam, self.low, self.high, self.mean)


def _calibrated_affine(s, low, high, target):
    """``clip(a + b z, low, high)`` on the min-max scaled ``s`` with the smallest
    slope ``b`` such that both clip bounds are attained and the mean equals
    ``target``."""
    s = np.asarray(s, dtype=float)
    if not low < target < high:
        raise ValueError("target mean must lie strictly inside the probability range")
    spread = s.max() - s.min()
    if spread <= 0:
        return np.full(len(s), target)
    z = (s - s.min()) / spread

    def intercept(b):
        # the clipped mean is nondecreasing in the intercept
        return brentq(lambda a: np.clip(a + b * z, low, high).mean() - target,
                      low - b - 1.0, high + 1.0, xtol=1e-13)

    def slack(b):
        a = intercept(b)
        return min(low - a, a + b - high)

    b = high - low
    if slack(b) < 0:
        b_hi = 2.0 * b
        while slack(b_hi) < 0:
            b_hi *= 2.0
            if b_hi > 1e8:
                raise ValueError("cannot calibrate coarsening probabilities")
        b = brentq(slack, b, b_hi, xtol=1e-12)
        # land on the feasible side of the root
        while slack(b) < -1e-12:
            b *= 1 + 1e-12
    return np.clip(intercept(b) + b * z, low, high)


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    n: int = 250
    rho: float = 0.5
    beta: tuple[float, ...] = (1.0, 1.0, -1.0)
    sigma2: float = 1.0
    side: float = 1.5
    kappa_threshold: float = 0.5
    coarsening: CoarseningSpec = CoarseningSpec()
    replications: int = 300
    desk_replications: int = 50
    seed: int = 20240611
    intensity: dict = field(default_factory=lambda: default_intensity().to_dict())
    window: tuple[tuple[float, float], ...] = DEFAULT_WINDOW_VERTICES

    def __post_init__(self):
        if self.n < 2 or self.replications < 1 or not self.sigma2 > 0:
            raise ValueError("scenario needs n >= 2, replications >= 1 and sigma2 > 0")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1) for row-standardised weights")

    @property
    def params(self) -> SlmParams:
        return SlmParams(self.rho, np.array(self.beta), self.sigma2)

    @property
    def kappa(self) -> KappaSpec:
        return KappaSpec.indicator(self.kappa_threshold)

    def at_scale(self, scale: str) -> "ScenarioConfig":
        if scale == "desk":
            return replace(self, replications=self.desk_replications)
        if scale == "paper":
            return replace(self, replications=300)
        raise ValueError(f"unknown scale {scale!r}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["coarsening"] = asdict(self.coarsening)
        return doc


def scenario_catalog() -> dict[str, ScenarioConfig]:
    """Scenarios A-H: a baseline and seven one-factor departures from it."""
    A = ScenarioConfig("A")
    return {
        "A": A,
        "B": replace(A, id="B", rho=0.3),
        "C": replace(A, id="C", rho=0.7),
        "D": replace(A, id="D", sigma2=2.0),
        "E": replace(A, id="E", n=500, kappa_threshold=math.sqrt(1.0 / 8.0)),
        "F": replace(A, id="F", coarsening=CoarseningSpec("intensity", sign=1, low=0.2, high=0.75)),
        "G": replace(A, id="G", coarsening=CoarseningSpec("intensity", sign=-1, low=0.04, high=0.60)),
        "H": replace(A, id="H", side=1.0),
    }


def get_scenario(scenario_id: str) -> ScenarioConfig:
    catalog = scenario_catalog()
    try:
        return catalog[scenario_id.upper()]
    except KeyError:
        raise KeyError(f"unknown scenario {scenario_id!r}; expected one of {', '.join(catalog)}") from None


def relative_metrics(estimates, truth: float) -> tuple[float, float]:
    """Relative bias and relative RMSE, both in percent of ``|truth|``."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates")
    if truth == 0:
        raise ValueError("relative metrics are undefined for a zero true value")
    err = est - truth
    return 100.0 * err.mean() / abs(truth), 100.0 * math.sqrt(np.mean(err**2)) / abs(truth)


# ----------------------------------------------------------------------------
# data generation


@dataclass(frozen=True, eq=False)
class SharedDesign:
    """Objects held fixed across replications: pattern, design, true weights."""

    config: ScenarioConfig
    partition: Partition
    points: np.ndarray
    X: np.ndarray
    W: object
    geocode_probs: np.ndarray
    intensity: GaussianBumpIntensity

    def quantity_names(self) -> list[str]:
        k = self.X.shape[1]
        j = IMPACT_REGRESSOR
        return ["rho"] + [f"beta{i}" for i in range(k)] + ["sigma", f"D{j}", f"M{j}", f"T{j}"]

    def truth(self) -> dict[str, float]:
        cfg = self.config
        imp = impacts_exact(cfg.rho, cfg.beta, self.W)
        j = IMPACT_REGRESSOR
        out = {"rho": cfg.rho, "sigma": math.sqrt(cfg.sigma2)}
        out.update({f"beta{i}": b for i, b in enumerate(cfg.beta)})
        out.update({f"D{j}": imp.direct[j], f"M{j}": imp.indirect[j], f"T{j}": imp.total[j]})
        return out


def make_shared(config: ScenarioConfig) -> SharedDesign:
    rng = np.random.default_rng([config.seed, 0])
    window = Window(config.window)
    partition = build_hex_partition(window, config.side)
    lam = intensity_from_dict(config.intensity)
    points = simulate_fixed_n(lam, window, config.n, rng)
    X = np.column_stack([np.ones(config.n), rng.standard_normal((config.n, len(config.beta) - 1))])
    W = build_weight_matrix(points, config.kappa, standardise=True)
    geocode = 1.0 - config.coarsening.coarsening_probs(lam(points))
    return SharedDesign(config, partition, points, X, W, geocode, lam)


def simulate_replication(shared: SharedDesign, rep: int) -> CoarsenedDataset:
    """Fresh errors and fresh geocoding flags on the shared pattern."""
    cfg = shared.config
    rng = np.random.default_rng([cfg.seed, 1, rep])
    y = simulate_slm(shared.W, shared.X, cfg.params, rng)
    flags = apply_coarsening(shared.points, shared.geocode_probs, shared.partition, rng)
    coords = shared.points.copy()
    coords[~flags.observed] = np.nan
    return CoarsenedDataset(y, shared.X, coords, flags, shared.partition, true_coords=shared.points)


def _row(res, imp) -> dict[str, float]:
    j = IMPACT_REGRESSOR
    out = {"rho": res.rho, "sigma": math.sqrt(res.sigma2)}
    out.update({f"beta{i}": b for i, b in enumerate(res.beta)})
    out.update({f"D{j}": imp.direct[j], f"M{j}": imp.indirect[j], f"T{j}": imp.total[j]})
    return out


def _run_replication(shared: SharedDesign, rep: int, methods, dme: DmeConfig,
                     impact_draws: int, truncation: int):
    cfg = shared.config
    data = simulate_replication(shared, rep)
    rng = np.random.default_rng([cfg.seed, 2, rep])
    kappa = cfg.kappa
    rows, errors = {}, {}
    srem = None

    def attempt(name, fn):
        try:
            rows[name] = fn()
        except Exception as exc:  # recorded as a skipped replication
            errors[name] = f"{type(exc).__name__}: {exc}"

    if "NCM" in methods:
        def ncm():
            r = fit_ncm(data, kappa)
            return _row(r, impacts_exact(r.rho, r.beta, r.diagnostics["W"]))
        attempt("NCM", ncm)
    for name, fn in (("SREM", fit_srem), ("REM", fit_rem), ("CIP", fit_cip)):
        if name in methods or (name == "SREM" and "DME" in methods):
            def restricted(fn=fn):
                r = fn(data, kappa)
                return r, _row(r, impacts_exact(r.rho, r.beta, r.diagnostics["W"]))
            try:
                res, row = restricted()
            except Exception as exc:
                errors[name] = f"{type(exc).__name__}: {exc}"
                continue
            if name == "SREM":
                srem = res
            if name in methods:
                rows[name] = row
    if "DME" in methods:
        def dme_fit():
            init = srem.params if srem is not None else None
            r = fit_dme(data, kappa, dme, rng=rng, init=init)
            field_ = r.diagnostics["field"]
            if field_ is None:
                imp = impacts_exact(r.rho, r.beta, build_weight_matrix(data.coords, kappa))
            else:
                imp, _ = impacts_mc(
                    r.rho, r.beta, data.observed_coords, data.observed, data.flags.regions,
                    field_, data.partition, kappa, rng, n_draws=impact_draws,
                    truncation=truncation,
                )
            return _row(r, imp)
        attempt("DME", dme_fit)
    return rows, errors


@dataclass
class MetricsTable:
    """Relative RMSE and bias (percent) per method and quantity."""

    scenario: str
    quantities: list[str]
    truth: dict[str, float]
    cells: dict[str, dict[str, tuple[float, float]]]
    counts: dict[str, int]
    skips: dict[str, int]
    estimates: dict[str, dict[str, list[float]]] = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict)

    def bias(self, method: str, quantity: str) -> float:
        return self.cells[method][quantity][0]

    def rmse(self, method: str, quantity: str) -> float:
        return self.cells[method][quantity][1]

    @property
    def methods(self) -> list[str]:
        return list(self.cells)

    def csv_lines(self) -> list[str]:
        head = ["method", "replications", "skipped"]
        for q in self.quantities:
            head += [f"{q}_rrmse", f"{q}_rbias"]
        lines = [",".join(head)]
        for m, row in self.cells.items():
            vals = [m, str(self.counts[m]), str(self.skips[m])]
            for q in self.quantities:
                b, r = row[q]
                vals += [f"{r:.6g}", f"{b:.6g}"]
            lines.append(",".join(vals))
        return lines

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "quantities": self.quantities,
            "truth": self.truth,
            "cells": {m: {q: {"rbias": b, "rrmse": r} for q, (b, r) in row.items()}
                      for m, row in self.cells.items()},
            "counts": self.counts,
            "skips": self.skips,
            "meta": self.meta,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def run_scenario(
    config: ScenarioConfig,
    methods=METHODS,
    dme: DmeConfig | None = None,
    workers: int = 1,
    impact_draws: int = 32,
    truncation: int = 30,
    replications: int | None = None,
) -> MetricsTable:
    """Replicate a scenario and tabulate relative bias/RMSE per method.

    One pattern and design matrix are drawn from the scenario seed and shared
    by every replication; errors and geocoding flags are redrawn each time.
    """
    methods = [m.upper() for m in methods]
    if not methods:
        raise ValueError("at least one method is required")
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise ValueError(f"unknown methods: {', '.join(unknown)}")
    methods = [m for m in METHODS if m in methods]
    dme = dme or DmeConfig()
    n_rep = config.replications if replications is None else int(replications)
    start = time.perf_counter()
    shared = make_shared(config)
    jobs = (delayed(_run_replication)(shared, r, methods, dme, impact_draws, truncation)
            for r in range(n_rep))
    if workers == 1:
        results = [job[0](*job[1], **job[2]) for job in jobs]
    else:
        results = Parallel(n_jobs=workers)(jobs)
    quantities = shared.quantity_names()
    truth = shared.truth()
    estimates = {m: {q: [] for q in quantities} for m in methods}
    skips = {m: 0 for m in methods}
    error_log = []
    for rep, (rows, errors) in enumerate(results):
        for m in methods:
            if m in rows:
                for q in quantities:
                    estimates[m][q].append(rows[m][q])
            else:
                skips[m] += 1
                if m in errors:
                    error_log.append({"replication": rep, "method": m, "error": errors[m]})
    cells, counts = {}, {}
    for m in methods:
        counts[m] = n_rep - skips[m]
        cells[m] = {
            q: relative_metrics(estimates[m][q], truth[q]) if counts[m] else (math.nan, math.nan)
            for q in quantities
        }
    table = MetricsTable(
        config.id, quantities, truth, cells, counts, skips, estimates,
        meta={
            "seed": config.seed,
            "replications": n_rep,
            "dme": asdict(dme),
            "impact_draws": impact_draws,
            "truncation": truncation,
            "seconds": time.perf_counter() - start,
            "errors": error_log,
        },
    )
    worst = max(skips.values()) / n_rep
    if worst > MAX_SKIP_RATE:
        raise SkipRateError(
            f"scenario {config.id}: skip rate {worst:.0%} exceeds {MAX_SKIP_RATE:.0%}", table
        )
    return table
