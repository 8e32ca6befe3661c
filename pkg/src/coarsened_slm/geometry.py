"""Study window, hexagonal partitions and point-in-region queries."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Point, Polygon
from shapely.ops import nearest_points

__all__ = [
    "DEFAULT_WINDOW_VERTICES",
    "Window",
    "Partition",
    "build_hex_partition",
    "default_window",
]

# 12-vertex simple polygon; with the tiling anchored at its bounding-box
# corner, side 1.5 gives 17 clipped regions and side 1 gives 29.
DEFAULT_WINDOW_VERTICES = (
    (0.9, 0.2),
    (2.8, 1.1),
    (5.3, 0.7),
    (7.1, 1.5),
    (9.7, 1.1),
    (8.6, 3.6),
    (7.1, 5.5),
    (7.1, 7.4),
    (4.6, 8.7),
    (3.0, 8.8),
    (1.0, 6.9),
    (0.8, 4.3),
)


class GeometryError(ValueError):
    """Raised for invalid windows, partitions or out-of-window queries."""


@dataclass(frozen=True)
class Window:
    """Closed simple polygon bounding the study area."""

    vertices: tuple[tuple[float, float], ...]
    polygon: Polygon = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise GeometryError("a window needs at least three vertices")
        poly = Polygon(verts)
        if not poly.is_valid or not poly.is_simple:
            raise GeometryError("window boundary must be a simple polygon")
        if poly.area <= 0:
            raise GeometryError("window has zero area")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "polygon", poly)
        shapely.prepare(poly)

    @property
    def area(self) -> float:
        return self.polygon.area

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.polygon.bounds

    @property
    def diameter(self) -> float:
        xmin, ymin, xmax, ymax = self.bounds
        return math.hypot(xmax - xmin, ymax - ymin)

    def contains(self, points) -> np.ndarray:
        """Boolean mask of points lying in the closed window."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return shapely.intersects_xy(self.polygon, pts[:, 0], pts[:, 1]) | (
            shapely.distance(self.polygon, shapely.points(pts)) < 1e-12 * self.diameter
        )


def default_window() -> Window:
    return Window(DEFAULT_WINDOW_VERTICES)


def _hexagon(cx: float, cy: float, side: float) -> Polygon:
    angles = np.arange(6) * (np.pi / 3.0)
    return Polygon(np.column_stack([cx + side * np.cos(angles), cy + side * np.sin(angles)]))


def _interior_anchor(region, guess: Point) -> Point:
    """Nearest point strictly inside ``region`` to ``guess``."""
    if region.contains(guess):
        return guess
    scale = math.sqrt(region.area)
    for shrink in (1e-6, 1e-4, 1e-2):
        inner = region.buffer(-shrink * scale)
        if inner.is_empty:
            continue
        candidate = nearest_points(inner, guess)[0]
        if region.contains(candidate):
            return candidate
    return region.representative_point()


class Partition:
    """Ordered decomposition of a window into regions with interior anchors.

    Parameters
    ----------
    window : Window
    regions : sequence of shapely polygons
        Pairwise interior-disjoint pieces covering the window.
    side : float, optional
        Hexagon side length when built by :func:`build_hex_partition`.
    centroids : array-like, optional
        Stored region centroids; computed (and clamped inside) when omitted.
    """

    def __init__(self, window: Window, regions, side: float | None = None, centroids=None):
        self.window = window
        self.regions = tuple(regions)
        if not self.regions:
            raise GeometryError("a partition needs at least one region")
        self.side = side
        if centroids is None:
            cents = [
                _interior_anchor(reg, reg.centroid).coords[0] for reg in self.regions
            ]
        else:
            cents = [tuple(map(float, c)) for c in centroids]
            if len(cents) != len(self.regions):
                raise GeometryError("one centroid per region is required")
        self._centroids = np.asarray(cents, dtype=float)
        self._centroids.setflags(write=False)
        for reg in self.regions:
            shapely.prepare(reg)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def centroids(self) -> np.ndarray:
        return self._centroids

    @property
    def areas(self) -> np.ndarray:
        return np.array([reg.area for reg in self.regions])

    def centroid(self, r: int) -> np.ndarray:
        if not 0 <= int(r) < self.n_regions:
            raise IndexError(f"region index {r} out of range [0, {self.n_regions})")
        return self._centroids[int(r)].copy()

    def locate(self, points) -> np.ndarray | int:
        """Region index of each point; boundary points go to the lowest index.

        Accepts a single ``(x, y)`` pair (returns an int) or an ``(m, 2)`` array.
        """
        arr = np.asarray(points, dtype=float)
        single = arr.ndim == 1
        pts = np.atleast_2d(arr)
        labels = np.full(len(pts), -1, dtype=np.int64)
        todo = np.ones(len(pts), dtype=bool)
        for r, reg in enumerate(self.regions):
            if not todo.any():
                break
            idx = np.flatnonzero(todo)
            hit = shapely.intersects_xy(reg, pts[idx, 0], pts[idx, 1])
            labels[idx[hit]] = r
            todo[idx[hit]] = False
        if todo.any():
            # floating slivers along clipped edges: snap to the nearest region
            idx = np.flatnonzero(todo)
            geoms = shapely.points(pts[idx])
            tol = 1e-9 * self.window.diameter
            for j, g in zip(idx, geoms):
                if self.window.polygon.distance(g) > tol:
                    raise GeometryError(f"point {tuple(pts[j])} lies outside the window")
                dists = np.array([reg.distance(g) for reg in self.regions])
                labels[j] = int(np.argmin(dists))
        return int(labels[0]) if single else labels

    def to_dict(self) -> dict:
        return {
            "window": [list(v) for v in self.window.vertices],
            "side": self.side,
            "regions": [_geom_to_rings(reg) for reg in self.regions],
            "centroids": self._centroids.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Partition":
        window = Window([tuple(v) for v in doc["window"]])
        if doc.get("regions"):
            regions = [_rings_to_geom(rings) for rings in doc["regions"]]
            return cls(window, regions, side=doc.get("side"), centroids=doc.get("centroids"))
        if doc.get("side") is None:
            raise GeometryError("partition document needs either regions or a side length")
        return build_hex_partition(window, float(doc["side"]))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_json(cls, path) -> "Partition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _geom_to_rings(geom) -> list:
    polys = geom.geoms if isinstance(geom, MultiPolygon) else [geom]
    return [[list(map(float, xy)) for xy in poly.exterior.coords[:-1]] for poly in polys]


def _rings_to_geom(rings):
    polys = [Polygon(ring) for ring in rings]
    return polys[0] if len(polys) == 1 else MultiPolygon(polys)


def build_hex_partition(window: Window, side: float, origin=None) -> Partition:
    """Clip a flat-top hexagonal tiling to the window.

    Hexagon centres sit on the lattice ``origin + (1.5 s i, sqrt(3) s (j + i/2 mod 1))``
    with ``origin`` defaulting to the window's lower-left bounding-box corner.
    Regions are ordered row-major over ``(j, i)``; every nonempty fragment of
    a tile is one region.
    """
    if not side > 0:
        raise GeometryError("hexagon side must be positive")
    if window.area <= 0:
        raise GeometryError("degenerate window")
    xmin, ymin, xmax, ymax = window.bounds
    ox, oy = (xmin, ymin) if origin is None else map(float, origin)
    dx, dy = 1.5 * side, math.sqrt(3.0) * side
    i_lo = math.floor((xmin - ox - side) / dx) - 1
    i_hi = math.ceil((xmax - ox + side) / dx) + 1
    j_lo = math.floor((ymin - oy - dy) / dy) - 1
    j_hi = math.ceil((ymax - oy + dy) / dy) + 1
    poly = window.polygon
    regions = []
    for j in range(j_lo, j_hi + 1):
        for i in range(i_lo, i_hi + 1):
            cx = ox + i * dx
            cy = oy + (j + 0.5 * (i % 2)) * dy
            tile = _hexagon(cx, cy, side)
            if not tile.intersects(poly):
                continue
            piece = tile.intersection(poly)
            piece = _polygonal_part(piece)
            if piece is None or piece.area <= 1e-12 * window.area:
                continue
            regions.append(piece)
    return Partition(window, regions, side=side)


def _polygonal_part(geom):
    if geom.is_empty:
        return None
    if isinstance(geom, (Polygon, MultiPolygon)):
        return geom
    parts = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon) and g.area > 0]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else MultiPolygon(parts)
