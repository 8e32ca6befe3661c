"""Inhomogeneous point patterns, coarsening and the coarsened-data intensity.

The intensity of an incompletely geocoded pattern is estimated with an
inverse-propensity weighted Gaussian kernel estimator, where the geocoding
propensity is the per-region share of observed units. Coarsened locations are
then resampled from that intensity restricted to each unit's known region.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import shapely

from .geometry import Partition, Window

__all__ = [
    "GaussianBumpIntensity",
    "ConstantIntensity",
    "default_intensity",
    "GridSpec",
    "IntensityField",
    "CoarseningFlags",
    "PropensityEstimate",
    "simulate_fixed_n",
    "apply_coarsening",
    "estimate_propensity",
    "estimate_intensity",
    "default_bandwidth",
    "gaussian_kernel",
    "sample_conditional_locations",
]


class GaussianBumpIntensity:
    """Constant floor plus a sum of isotropic Gaussian bumps.

    Parameters
    ----------
    base : float
        Constant background level.
    bumps : sequence of (cx, cy, amplitude, width)
    """

    def __init__(self, base: float, bumps=()):
        self.base = float(base)
        self.bumps = tuple(tuple(map(float, b)) for b in bumps)
        if self.base < 0 or any(b[2] < 0 or b[3] <= 0 for b in self.bumps):
            raise ValueError("intensity components must be nonnegative with positive widths")

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), self.base)
        for cx, cy, amp, width in self.bumps:
            d2 = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2
            out += amp * np.exp(-0.5 * d2 / width**2)
        return out

    def to_dict(self) -> dict:
        return {"kind": "bumps", "base": self.base, "bumps": [list(b) for b in self.bumps]}


class ConstantIntensity(GaussianBumpIntensity):
    def __init__(self, level: float = 1.0):
        super().__init__(level, ())

    def to_dict(self) -> dict:
        return {"kind": "constant", "base": self.base}


def default_intensity() -> GaussianBumpIntensity:
    """Two-bump surface used by the simulation scenarios."""
    return GaussianBumpIntensity(0.25, [(3.3, 3.2, 1.0, 1.2), (5.4, 6.4, 0.8, 1.5)])


def intensity_from_dict(doc: dict) -> GaussianBumpIntensity:
    if doc.get("kind", "bumps") == "constant":
        return ConstantIntensity(doc.get("base", 1.0))
    return GaussianBumpIntensity(doc["base"], doc.get("bumps", ()))


# ----------------------------------------------------------------------------
# grid machinery


@dataclass(frozen=True)
class GridSpec:
    """Rectangular lattice of cells over the window's bounding box."""

    window: Window
    nx: int = 128
    ny: int = 128

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")

    @property
    def bounds(self):
        return self.window.bounds

    @property
    def cell_size(self) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.bounds
        return (xmax - xmin) / self.nx, (ymax - ymin) / self.ny

    @property
    def cell_area(self) -> float:
        dx, dy = self.cell_size
        return dx * dy

    @functools.cached_property
    def centers(self) -> np.ndarray:
        """Cell centres, flattened row-major (y outer, x inner), shape (ny*nx, 2)."""
        xmin, ymin, _, _ = self.bounds
        dx, dy = self.cell_size
        xs = xmin + (np.arange(self.nx) + 0.5) * dx
        ys = ymin + (np.arange(self.ny) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    @functools.cached_property
    def boxes(self) -> np.ndarray:
        dx, dy = self.cell_size
        c = self.centers
        return shapely.box(c[:, 0] - dx / 2, c[:, 1] - dy / 2, c[:, 0] + dx / 2, c[:, 1] + dy / 2)

    @functools.cached_property
    def coverage(self) -> np.ndarray:
        """Fraction of each cell's area inside the window."""
        inter = shapely.area(shapely.intersection(self.boxes, self.window.polygon))
        return np.clip(inter / self.cell_area, 0.0, 1.0)

    @property
    def mask(self) -> np.ndarray:
        return self.coverage > 0

    def cell_index(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        xmin, ymin, _, _ = self.bounds
        dx, dy = self.cell_size
        ix = np.clip(((pts[:, 0] - xmin) / dx).astype(np.int64), 0, self.nx - 1)
        iy = np.clip(((pts[:, 1] - ymin) / dy).astype(np.int64), 0, self.ny - 1)
        return iy * self.nx + ix


@dataclass(frozen=True)
class IntensityField:
    """Gridded intensity: one value per cell centre, zero outside the window."""

    grid: GridSpec
    values: np.ndarray
    bandwidth: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel().copy()
        if vals.shape != (self.grid.nx * self.grid.ny,):
            raise ValueError("field values do not match the grid")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("intensity values must be finite and nonnegative")
        vals[~self.grid.mask] = 0.0
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __call__(self, points) -> np.ndarray:
        return self.values[self.grid.cell_index(points)]

    def integral(self) -> float:
        return float(np.sum(self.values * self.grid.coverage) * self.grid.cell_area)

    def to_csv(self, path) -> None:
        c = self.grid.centers
        keep = self.grid.mask
        with open(path, "w") as fh:
            fh.write("x,y,value\n")
            for (x, y), v in zip(c[keep], self.values[keep]):
                fh.write(f"{x:.6g},{y:.6g},{v:.6g}\n")

    def to_json(self, path) -> None:
        doc = {
            "bounds": list(self.grid.bounds),
            "shape": [self.grid.ny, self.grid.nx],
            "bandwidth": self.bandwidth,
            "mask": self.grid.mask.astype(int).tolist(),
            "values": [float(f"{v:.6g}") for v in self.values],
        }
        doc.update(self.meta)
        Path(path).write_text(json.dumps(doc))


def gaussian_kernel(d2, h: float) -> np.ndarray:
    """Isotropic bivariate normal density at squared distance ``d2``."""
    return np.exp(-0.5 * np.asarray(d2) / h**2) / (2.0 * math.pi * h**2)


# ----------------------------------------------------------------------------
# simulation


def _envelope(intensity: Callable, window: Window) -> float:
    if isinstance(intensity, IntensityField):
        return float(intensity.values.max())
    grid = GridSpec(window, 200, 200)
    vals = np.asarray(intensity(grid.centers), dtype=float)
    if not np.all(np.isfinite(vals)) or np.any(vals < 0):
        raise ValueError("intensity must be finite and nonnegative on the window")
    return float(vals.max()) * 1.1


def simulate_fixed_n(intensity: Callable, window: Window, n: int, rng) -> np.ndarray:
    """Draw ``n`` iid locations with density proportional to ``intensity``.

    Rejection sampling from the bounding box against a constant envelope.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return np.empty((0, 2))
    lam_max = _envelope(intensity, window)
    if not lam_max > 0:
        raise ValueError("intensity is identically zero on the window")
    xmin, ymin, xmax, ymax = window.bounds
    out = []
    need = n
    for _ in range(10_000):
        batch = max(4 * need, 64)
        cand = np.column_stack(
            [rng.uniform(xmin, xmax, batch), rng.uniform(ymin, ymax, batch)]
        )
        inside = shapely.contains_xy(window.polygon, cand[:, 0], cand[:, 1])
        cand = cand[inside]
        lam = np.asarray(intensity(cand), dtype=float)
        if np.any(lam > lam_max):
            raise ValueError("intensity exceeds its estimated envelope")
        keep = cand[rng.uniform(0.0, lam_max, len(cand)) < lam]
        out.append(keep[:need])
        need -= len(out[-1])
        if need == 0:
            return np.concatenate(out)
    raise RuntimeError("rejection sampler failed to produce the requested points")


@dataclass(frozen=True)
class CoarseningFlags:
    """Per-unit geocoding outcome and region labels.

    ``observed[i]`` is True when unit ``i`` kept its exact coordinates.
    ``regions[i]`` is the region containing unit ``i``; it is the only spatial
    information carried for coarsened units.
    """

    observed: np.ndarray
    regions: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=bool)
        reg = np.asarray(self.regions, dtype=np.int64)
        if obs.shape != reg.shape or obs.ndim != 1:
            raise ValueError("observed and regions must be equal-length vectors")
        if np.any(reg < 0):
            raise ValueError("every unit needs a valid region label")
        obs.setflags(write=False)
        reg.setflags(write=False)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "regions", reg)

    @property
    def n(self) -> int:
        return len(self.observed)

    @property
    def p(self) -> int:
        return int(self.observed.sum())

    @property
    def observed_index(self) -> np.ndarray:
        return np.flatnonzero(self.observed)

    @property
    def coarsened_index(self) -> np.ndarray:
        return np.flatnonzero(~self.observed)

    @classmethod
    def all_observed(cls, points, partition: Partition) -> "CoarseningFlags":
        labels = partition.locate(points) if len(points) else np.empty(0, dtype=np.int64)
        return cls(np.ones(len(points), dtype=bool), labels)


def apply_coarsening(points, phi, partition: Partition, rng) -> CoarseningFlags:
    """Independently geocode each unit with probability ``phi``.

    ``phi`` is a scalar, a per-point array, or a callable of locations giving
    the probability of *keeping* the exact coordinates.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    n = len(pts)
    if callable(phi):
        prob = np.asarray(phi(pts), dtype=float)
    else:
        prob = np.broadcast_to(np.asarray(phi, dtype=float), (n,))
    if np.any((prob < 0) | (prob > 1)):
        raise ValueError("geocoding probabilities must lie in [0, 1]")
    observed = rng.random(n) < prob
    labels = partition.locate(pts) if n else np.empty(0, dtype=np.int64)
    return CoarseningFlags(observed, labels)


# ----------------------------------------------------------------------------
# estimation


@dataclass(frozen=True)
class PropensityEstimate:
    values: np.ndarray
    fallback: float

    def __call__(self, regions) -> np.ndarray:
        return self.values[np.asarray(regions, dtype=np.int64)]


def estimate_propensity(flags: CoarseningFlags, n_regions: int) -> PropensityEstimate:
    """Share of observed units in each region; empty regions get ``p/n``."""
    if flags.n == 0:
        raise ValueError("cannot estimate a propensity from zero units")
    if flags.regions.max() >= n_regions:
        raise ValueError("region label out of range")
    total = np.bincount(flags.regions, minlength=n_regions).astype(float)
    seen = np.bincount(flags.regions, weights=flags.observed.astype(float), minlength=n_regions)
    fallback = flags.p / flags.n
    values = np.where(total > 0, seen / np.maximum(total, 1.0), fallback)
    return PropensityEstimate(values, fallback)


def default_bandwidth(points) -> float:
    """``n^(-1/6)`` times the pooled coordinate standard deviation."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(pts)
    if n < 2:
        raise ValueError("the default bandwidth needs at least two points")
    pooled = math.sqrt(0.5 * (pts[:, 0].var(ddof=1) + pts[:, 1].var(ddof=1)))
    if pooled <= 0:
        raise ValueError("observed points are all coincident")
    return n ** (-1.0 / 6.0) * pooled


def estimate_intensity(
    points,
    regions,
    propensity: PropensityEstimate,
    window: Window,
    bandwidth: float | None = None,
    grid: tuple[int, int] | GridSpec = (128, 128),
) -> IntensityField:
    """Inverse-propensity weighted kernel intensity on a grid.

    Parameters
    ----------
    points : (p, 2) array
        Exact locations of the observed units.
    regions : (p,) int array
        Region of each observed point.
    propensity : PropensityEstimate
    window : Window
    bandwidth : float, optional
        Kernel standard deviation; :func:`default_bandwidth` when omitted.
    grid : (nx, ny) or GridSpec
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one observed point")
    h = default_bandwidth(pts) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    phi = propensity(regions)
    if np.any(phi <= 0):
        raise ValueError("observed points must lie in regions with positive propensity")
    spec = grid if isinstance(grid, GridSpec) else GridSpec(window, *grid)
    centers = spec.centers
    weights = 1.0 / phi
    values = np.zeros(len(centers))
    live = np.flatnonzero(spec.mask)
    for start in range(0, len(live), 4096):
        idx = live[start : start + 4096]
        d2 = ((centers[idx, None, :] - pts[None, :, :]) ** 2).sum(-1)
        values[idx] = gaussian_kernel(d2, h) @ weights
    return IntensityField(spec, values, bandwidth=h)


# ----------------------------------------------------------------------------
# conditional location sampler


@dataclass(frozen=True)
class _RegionCells:
    cells: np.ndarray  # flat cell indices touching the region
    area: np.ndarray  # area of cell ∩ region
    lo: np.ndarray  # (k, 2) lower corner of the piece's bounding box
    hi: np.ndarray  # (k, 2) upper corner


@functools.lru_cache(maxsize=32)
def _region_cells(grid: GridSpec, partition: Partition) -> tuple[_RegionCells, ...]:
    boxes = grid.boxes
    tables = []
    for reg in partition.regions:
        cand = np.flatnonzero(shapely.intersects(boxes, reg))
        pieces = shapely.intersection(boxes[cand], reg)
        area = shapely.area(pieces)
        keep = area > 1e-14 * grid.cell_area
        cand, pieces, area = cand[keep], pieces[keep], area[keep]
        b = shapely.bounds(pieces)
        tables.append(_RegionCells(cand, area, b[:, :2], b[:, 2:]))
    return tuple(tables)


def sample_conditional_locations(
    field: IntensityField,
    regions,
    partition: Partition,
    rng,
    jitter: bool = True,
) -> np.ndarray:
    """Draw one location per label from the field restricted to that region.

    A cell is chosen with probability proportional to its value times the
    area it shares with the region, then the point is drawn uniformly in that
    shared piece. Regions carrying no mass are sampled uniformly. With
    ``jitter=False`` the chosen cell centre is returned instead.
    """
    labels = np.asarray(regions, dtype=np.int64).ravel()
    out = np.empty((len(labels), 2))
    if len(labels) == 0:
        return out
    tables = _region_cells(field.grid, partition)
    centers = field.grid.centers
    for r in np.unique(labels):
        slots = np.flatnonzero(labels == r)
        tab = tables[r]
        mass = field.values[tab.cells] * tab.area
        if not mass.sum() > 0:
            mass = tab.area
        cdf = np.cumsum(mass)
        pick = np.searchsorted(cdf, rng.random(len(slots)) * cdf[-1], side="right")
        pick = np.minimum(pick, len(cdf) - 1)
        if not jitter:
            out[slots] = centers[tab.cells[pick]]
            continue
        lo, hi = tab.lo[pick], tab.hi[pick]
        pts = lo + rng.random((len(slots), 2)) * (hi - lo)
        bad = ~shapely.contains_xy(partition.regions[r], pts[:, 0], pts[:, 1])
        for _ in range(10_000):
            if not bad.any():
                break
            j = np.flatnonzero(bad)
            pts[j] = lo[j] + rng.random((len(j), 2)) * (hi[j] - lo[j])
            bad[j] = ~shapely.contains_xy(partition.regions[r], pts[j, 0], pts[j, 1])
        else:
            raise RuntimeError(f"could not place a point inside region {r}")
        out[slots] = pts
    return out
