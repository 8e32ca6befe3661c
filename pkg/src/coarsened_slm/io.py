"""CSV readers and writers for points, datasets and sparse weights.

Numbers are written with six significant digits so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import math

import numpy as np
import scipy.sparse as sp

from .point_process import CoarseningFlags
from .slm import WeightMatrix

__all__ = [
    "DataFormatError",
    "fmt",
    "write_points",
    "read_points",
    "write_dataset",
    "read_dataset",
    "write_weights",
    "read_weights",
]


class DataFormatError(ValueError):
    """Malformed input file; the message carries the offending line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = str(path), line


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return ""
    return f"{v:.6g}"


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _read(path, required):
    """Yield ``(line_number, record)`` after checking the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(path, 1, "empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataFormatError(path, 1, f"missing columns: {', '.join(missing)}")
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    path, reader.line_num, f"expected {len(header)} fields, found {len(row)}"
                )
            rows.append((reader.line_num, dict(zip(header, (c.strip() for c in row)))))
        return header, rows


def _num(path, line, rec, key, allow_blank=False):
    text = rec[key]
    if text == "":
        if allow_blank:
            return math.nan
        raise DataFormatError(path, line, f"blank value in column {key!r}")
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(path, line, f"not a number in column {key!r}: {text!r}") from None
    if not math.isfinite(value):
        raise DataFormatError(path, line, f"non-finite value in column {key!r}")
    return value


def _int(path, line, rec, key):
    value = _num(path, line, rec, key)
    if value != int(value):
        raise DataFormatError(path, line, f"column {key!r} must be an integer")
    return int(value)


def write_points(path, coords, flags: CoarseningFlags) -> None:
    """Unit locations with their geocoding flag; coarsened units get blank x, y."""
    coords = np.asarray(coords, dtype=float)
    rows = []
    for i in range(flags.n):
        x, y = coords[i] if flags.observed[i] else (math.nan, math.nan)
        rows.append((i, x, y, bool(flags.observed[i]), int(flags.regions[i])))
    _write(path, ["id", "x", "y", "observed", "region"], rows)


def read_points(path):
    """Return ``(coords, flags)``; coarsened rows have NaN coordinates."""
    _, rows = _read(path, ["id", "x", "y", "observed", "region"])
    n = len(rows)
    coords = np.full((n, 2), np.nan)
    observed = np.zeros(n, dtype=bool)
    regions = np.zeros(n, dtype=np.int64)
    seen = set()
    for line, rec in rows:
        i = _int(path, line, rec, "id")
        if not 0 <= i < n or i in seen:
            raise DataFormatError(path, line, f"ids must be a permutation of 0..{n - 1}")
        seen.add(i)
        obs = _int(path, line, rec, "observed")
        if obs not in (0, 1):
            raise DataFormatError(path, line, "observed must be 0 or 1")
        observed[i] = bool(obs)
        regions[i] = _int(path, line, rec, "region")
        if regions[i] < 0:
            raise DataFormatError(path, line, "region labels must be nonnegative")
        if obs:
            coords[i] = (_num(path, line, rec, "x"), _num(path, line, rec, "y"))
    return coords, CoarseningFlags(observed, regions)


def write_dataset(path, y, X) -> None:
    X = np.asarray(X, dtype=float)
    header = ["y"] + [f"x{j}" for j in range(X.shape[1])]
    _write(path, header, (np.concatenate(([yi], xi)) for yi, xi in zip(np.asarray(y), X)))


def read_dataset(path):
    """Return ``(y, X)`` from columns ``y, x0, x1, ...``."""
    header, rows = _read(path, ["y"])
    xcols = [h for h in header if h != "y"]
    if not xcols:
        raise DataFormatError(path, 1, "no regressor columns")
    y = np.empty(len(rows))
    X = np.empty((len(rows), len(xcols)))
    for r, (line, rec) in enumerate(rows):
        y[r] = _num(path, line, rec, "y")
        X[r] = [_num(path, line, rec, c) for c in xcols]
    return y, X


def write_weights(path, W: WeightMatrix) -> None:
    _write(path, ["i", "j", "w"], W.to_coo_rows())


def read_weights(path, n: int, standardised: bool = True) -> WeightMatrix:
    _, rows = _read(path, ["i", "j", "w"])
    ii, jj, ww = [], [], []
    for line, rec in rows:
        i, j = _int(path, line, rec, "i"), _int(path, line, rec, "j")
        if not (0 <= i < n and 0 <= j < n):
            raise DataFormatError(path, line, f"index out of range for n={n}")
        if i == j:
            raise DataFormatError(path, line, "weights must have a zero diagonal")
        ii.append(i)
        jj.append(j)
        ww.append(_num(path, line, rec, "w"))
    M = sp.csr_matrix((ww, (ii, jj)), shape=(n, n))
    return WeightMatrix(M, standardised, M)
