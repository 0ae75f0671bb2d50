"""Cytogram containers, CSV ingestion and grid binning."""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Cytogram:
    """Weighted point cloud observed during one time slot.

    ``points`` is ``n_t x d``; ``weights`` holds the per-particle biomass.
    """

    t: int
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise DataError(f"time {self.t}: {pts.shape[0]} points but {w.shape[0]} weights")
        if w.size and (not np.all(np.isfinite(w)) or np.any(w <= 0)):
            raise DataError(f"time {self.t}: non-positive weight")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"time {self.t}: non-finite point coordinate")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def total_weight(self) -> float:
        return float(math.fsum(self.weights))


@dataclass(frozen=True)
class BinnedCytogram(Cytogram):
    """A cytogram whose points are occupied bin centers on a regular grid."""

    lo: np.ndarray | None = field(default=None, compare=False)
    hi: np.ndarray | None = field(default=None, compare=False)
    n_bins: int | None = field(default=None, compare=False)
    dropped: int = field(default=0, compare=False)

    @property
    def centers(self) -> np.ndarray:
        return self.points


@dataclass(frozen=True)
class CovariateMatrix:
    """``T x p`` covariates; row ``i`` belongs to time ``times[i]``."""

    times: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError("covariate matrix must be two-dimensional")
        if not np.all(np.isfinite(X)):
            raise DataError("covariate matrix contains missing or non-finite values")
        times = np.asarray(self.times, dtype=int).reshape(-1)
        if times.shape[0] != X.shape[0]:
            raise DataError("covariate times and rows disagree in length")
        X.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "times", times)

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def rows(self, times) -> np.ndarray:
        index = {int(t): i for i, t in enumerate(self.times)}
        try:
            return self.X[[index[int(t)] for t in times]]
        except KeyError as exc:
            raise DataError(f"missing covariate row for time {exc.args[0]}") from None


def _parse_float(value: str, where: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{where}: non-numeric field {value!r}") from None


def _parse_time(value: str, where: str) -> int:
    x = _parse_float(value, where)
    if x != int(x):
        raise DataError(f"{where}: time index {value!r} is not an integer")
    return int(x)


def read_cytograms(path) -> list[Cytogram]:
    """Read a ``time,y1..yd,biomass`` CSV into cytograms sorted by time."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "time" or header[-1] != "biomass":
            raise DataError(f"{path}: header must be time,y1,...,yd,biomass")
        d = len(header) - 2
        rows: dict[int, tuple[list, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != d + 2:
                raise DataError(f"{where}: expected {d + 2} fields, got {len(row)}")
            t = _parse_time(row[0], where)
            y = [_parse_float(v, where) for v in row[1:-1]]
            c = _parse_float(row[-1], where)
            if not (c > 0 and math.isfinite(c)):
                raise DataError(f"{where}: non-positive weight {row[-1]!r}")
            pts, ws = rows.setdefault(t, ([], []))
            pts.append(y)
            ws.append(c)
    return [
        Cytogram(t, np.array(pts, dtype=float).reshape(-1, d), np.array(ws))
        for t, (pts, ws) in sorted(rows.items())
    ]


def read_covariates(path) -> CovariateMatrix:
    """Read a ``time,x1..xp`` CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0].strip() != "time":
            raise DataError(f"{path}: header must be time,x1,...,xp")
        p = len(header) - 1
        times, X = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != p + 1:
                raise DataError(f"{where}: expected {p + 1} fields, got {len(row)}")
            if any(v.strip() == "" or v.strip().lower() in ("na", "nan") for v in row):
                raise DataError(f"{where}: missing value")
            times.append(_parse_time(row[0], where))
            X.append([_parse_float(v, where) for v in row[1:]])
    if len(set(times)) != len(times):
        raise DataError(f"{path}: duplicate time index")
    order = np.argsort(times, kind="stable")
    return CovariateMatrix(np.array(times)[order], np.array(X, dtype=float).reshape(-1, p)[order])


def ingest_dataset(cytogram_file, covariate_file) -> tuple[list[Cytogram], CovariateMatrix]:
    """Load cytograms and their covariates, aligned by time index.

    The returned covariate matrix has exactly one row per cytogram, in the
    same (sorted) order.
    """
    cytos = read_cytograms(cytogram_file)
    cov = read_covariates(covariate_file)
    known = set(int(t) for t in cov.times)
    for c in cytos:
        if c.t not in known:
            raise DataError(f"missing covariate row for time {c.t}")
    times = np.array([c.t for c in cytos], dtype=int)
    return cytos, CovariateMatrix(times, cov.rows(times))


def default_grid_bounds(cytograms, expand: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension min/max over all particles, widened by ``expand`` of the range."""
    pts = np.vstack([c.points for c in cytograms if c.n])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, np.maximum(np.abs(hi), 1.0))
    return lo - expand * span, hi + expand * span


def bin_cytogram(c: Cytogram, lo, hi, D: int) -> BinnedCytogram:
    """Aggregate particles into a regular ``D``-per-dimension grid.

    Particles outside ``[lo, hi]`` are dropped; a particle sitting exactly on
    ``hi`` goes to the last bin.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if D is None or int(D) < 1:
        raise ValueError("D must be a positive integer")
    D = int(D)
    if lo.shape != (c.d,) or hi.shape != (c.d,):
        raise ValueError("grid bounds must have one entry per dimension")
    if np.any(lo >= hi):
        raise ValueError("grid requires lo < hi in every dimension")
    width = (hi - lo) / D
    inside = np.all((c.points >= lo) & (c.points <= hi), axis=1)
    dropped = int(c.n - inside.sum())
    if dropped:
        log.warning("time %d: dropped %d out-of-range particles", c.t, dropped)
    pts, w = c.points[inside], c.weights[inside]
    idx = np.floor((pts - lo) / width).astype(np.int64)
    np.clip(idx, 0, D - 1, out=idx)
    flat = np.ravel_multi_index(idx.T, (D,) * c.d) if len(idx) else np.zeros(0, dtype=np.int64)
    cells, inverse = np.unique(flat, return_inverse=True)
    sums = np.zeros(len(cells))
    np.add.at(sums, inverse, w)
    keep = sums > 0
    cells = cells[keep]
    cell_idx = np.array(np.unravel_index(cells, (D,) * c.d)).T.reshape(-1, c.d)
    centers = lo + (cell_idx + 0.5) * width
    return BinnedCytogram(c.t, centers, sums[keep], lo=lo, hi=hi, n_bins=D, dropped=dropped)


def bin_dataset(cytograms, lo, hi, D: int) -> list[BinnedCytogram]:
    return [bin_cytogram(c, lo, hi, D) for c in cytograms]


def as_binned(c: Cytogram) -> BinnedCytogram:
    """Treat raw particles as unit bins (no aggregation)."""
    if isinstance(c, BinnedCytogram):
        return c
    return BinnedCytogram(c.t, c.points, c.weights)


@dataclass(frozen=True)
class Pooled:
    """All bins stacked: ``Y`` (M x d), weights ``c`` (M), row-of-time ``tidx`` (M)."""

    Y: np.ndarray
    c: np.ndarray
    tidx: np.ndarray
    T: int

    @functools.cached_property
    def total_weight(self) -> float:
        return float(math.fsum(self.c))


def pool(data) -> Pooled:
    """Stack a list of (binned) cytograms; ``tidx`` indexes positions in ``data``."""
    if not data:
        raise DataError("empty dataset")
    d = data[0].d
    if any(c.d != d for c in data):
        raise DataError("cytograms disagree in dimension")
    Y = np.vstack([c.points for c in data]).reshape(-1, d)
    w = np.concatenate([c.weights for c in data])
    tidx = np.repeat(np.arange(len(data)), [c.n for c in data])
    return Pooled(Y, w, tidx, len(data))


def write_cytograms(path, cytograms) -> None:
    d = cytograms[0].d
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", *(f"y{j + 1}" for j in range(d)), "biomass"])
        for c in cytograms:
            for y, w in zip(c.points, c.weights):
                wr.writerow([c.t, *(repr(float(v)) for v in y), repr(float(w))])


def write_binned(path, binned) -> None:
    d = binned[0].d
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", *(f"b{j + 1}" for j in range(d)), "weight"])
        for c in binned:
            for y, w in zip(c.points, c.weights):
                wr.writerow([c.t, *(repr(float(v)) for v in y), repr(float(w))])


def write_covariates(path, cov: CovariateMatrix) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", *(f"x{j + 1}" for j in range(cov.p))])
        for t, row in zip(cov.times, cov.X):
            wr.writerow([int(t), *(repr(float(v)) for v in row)])
