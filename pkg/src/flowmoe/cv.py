"""Blocked cross-validation, penalty grid search and nested CV."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .em import FitConfig, fit, lambda_max
from .features import FeaturePipeline, build_pipeline
from .model import log_pseudolikelihood


class CvError(RuntimeError):
    pass


@dataclass(frozen=True)
class FoldSpec:
    """Round-robin assignment of consecutive time blocks to folds (labels 1..n_folds)."""

    T: int
    block_size: int
    n_folds: int
    assignment: np.ndarray

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def folds(self):
        return range(1, self.n_folds + 1)


def make_folds(T: int, block_size: int = 20, n_folds: int = 5) -> FoldSpec:
    """Block ``j`` (times ``(j-1)*block_size + 1 ..``) goes to fold ``(j-1) % n_folds + 1``."""
    if n_folds < 2:
        raise ValueError("cross-validation needs at least two folds")
    if block_size < 1:
        raise ValueError("block_size must be positive")
    if T < n_folds:
        raise ValueError("fewer time points than folds")
    blocks = np.arange(T) // block_size
    return FoldSpec(T, block_size, n_folds, blocks % n_folds + 1)


@dataclass(frozen=True)
class CvGrid:
    lambda_alpha_values: tuple
    lambda_beta_values: tuple

    def __post_init__(self):
        for name in ("lambda_alpha_values", "lambda_beta_values"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} is empty")
            if any(v < 0 for v in vals) or any(b >= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be non-negative and strictly decreasing")
            object.__setattr__(self, name, vals)

    def cells(self) -> list[tuple[float, float]]:
        return [(a, b) for a in self.lambda_alpha_values for b in self.lambda_beta_values]


def default_grid(la_max: float, lb_max: float, n: int = 5, span: float = 1e-4) -> CvGrid:
    """``n`` log-spaced values per penalty from ``lambda_max`` down to ``span * lambda_max``."""
    def ladder(top):
        top = top if top > 0 else 1e-3
        return tuple(np.geomspace(top, top * span, n))
    return CvGrid(ladder(la_max), ladder(lb_max))


@dataclass(frozen=True)
class FeatureSpec:
    """How to turn covariates into regressors for each training split.

    ``use_pca=False`` treats the covariate matrix as principal-component
    scores already. ``pca_scope='global'`` fits one pipeline on all rows.
    """

    n_h: int = 70
    a: float = 0.5
    activation: str = "logistic"
    threshold: float = 0.95
    q: int | None = None
    use_pca: bool = True
    seed: int = 0
    pca_scope: str = "per-split"

    def __post_init__(self):
        if self.pca_scope not in ("per-split", "global"):
            raise ValueError("pca_scope must be 'per-split' or 'global'")

    def split_seed(self, key: tuple) -> int:
        ss = np.random.SeedSequence([self.seed, *key])
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def build(self, X_train, key: tuple = ()) -> FeaturePipeline:
        seed = self.split_seed(key) if key else self.seed
        return build_pipeline(X_train, seed=seed, n_h=self.n_h, a=self.a,
                              activation=self.activation, threshold=self.threshold,
                              q=self.q, use_pca=self.use_pca)


def split_features(X, train, test, spec: FeatureSpec, key: tuple):
    """Pipeline for a training split plus the train/test feature matrices."""
    X = np.asarray(getattr(X, "X", X), dtype=float)
    if spec.pca_scope == "global":
        pipe = spec.build(X)
    else:
        pipe = spec.build(X[train], key)
    return pipe, pipe.transform(X[train]), pipe.transform(X[test])


def _subset(data, idx):
    return [data[i] for i in idx]


def _cell_fold_job(args):
    data, X, spec, cfg, la, lb, train, test, key = args
    _, Ftr, Fte = split_features(X, train, test, spec, key)
    res = fit(_subset(data, train), Ftr, cfg.replace(lambda_alpha=la, lambda_beta=lb))
    return -log_pseudolikelihood(res.params, _subset(data, test), Fte)


def _run_jobs(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


@dataclass
class CvResult:
    best_lambda_alpha: float
    best_lambda_beta: float
    table: list  # rows (lambda_alpha, lambda_beta, fold, nlpl)
    mean_nlpl: dict = field(default_factory=dict)  # (la, lb) -> mean held-out NLPL


def _cells(grid):
    return grid.cells() if isinstance(grid, CvGrid) else [(float(a), float(b)) for a, b in grid]


def cross_validate(data, X, spec: FeatureSpec, cfg: FitConfig, grid, folds: FoldSpec,
                   threads: int = 1, key: tuple = ()) -> CvResult:
    """Average held-out NLPL per penalty pair; ties go to the larger penalties.

    ``data`` is a list of (binned) cytograms aligned with the rows of ``X``.
    """
    if folds.n_folds < 2:
        raise ValueError("need at least two folds")
    if len(data) != folds.T:
        raise ValueError("fold spec does not match the number of cytograms")
    cells = _cells(grid)
    jobs, coords = [], []
    for la, lb in cells:
        for j in folds.folds():
            jobs.append((data, X, spec, cfg, la, lb, folds.train_index(j), folds.test_index(j), (*key, j)))
            coords.append((la, lb, j))
    try:
        values = _run_jobs(_cell_fold_job, jobs, threads)
    except Exception as exc:
        # recompute serially to attach grid/fold coordinates to the failure
        for job, (la, lb, j) in zip(jobs, coords):
            try:
                _cell_fold_job(job)
            except Exception as inner:
                raise CvError(f"fold {j}, lambda_alpha={la:g}, lambda_beta={lb:g}: {inner}") from inner
        raise CvError(str(exc)) from exc
    table = [(la, lb, j, v) for (la, lb, j), v in zip(coords, values)]
    means = {}
    for la, lb in cells:
        vals = sorted(v for a, b, _, v in table if (a, b) == (la, lb))
        means[(la, lb)] = math.fsum(vals) / len(vals)
    best = min(means, key=lambda c: (means[c], -c[0], -c[1]))
    return CvResult(best[0], best[1], table, means)


@dataclass
class NestedCvResult:
    nlpl: float
    fold_nlpl: dict  # outer fold -> held-out NLPL
    chosen: dict  # outer fold -> (lambda_alpha, lambda_beta)


def data_driven_grid(data, X, spec: FeatureSpec, cfg: FitConfig, n: int = 5,
                     threads: int = 1, key: tuple = ()) -> CvGrid:
    idx = np.arange(len(data))
    _, F, _ = split_features(X, idx, idx[:0], spec, key)
    la, lb = lambda_max(data, F, cfg, threads)
    return default_grid(la, lb, n)


def nested_cv(data, X, spec: FeatureSpec, cfg: FitConfig, grid=None, block_size: int = 20,
              n_folds: int = 5, threads: int = 1) -> NestedCvResult:
    """Honest out-of-sample NLPL: inner CV picks penalties on each outer complement.

    Inner folds re-block the complement's time points in time order.
    ``grid=None`` derives a default grid from each complement.
    """
    outer = make_folds(len(data), block_size, n_folds)
    X = np.asarray(getattr(X, "X", X), dtype=float)
    fold_nlpl, chosen = {}, {}
    for j in outer.folds():
        train, test = outer.train_index(j), outer.test_index(j)
        dtr, Xtr = _subset(data, train), X[train]
        g = grid if grid is not None else data_driven_grid(dtr, Xtr, spec, cfg, threads=threads, key=(j,))
        inner = make_folds(len(train), block_size, n_folds)
        cv = cross_validate(dtr, Xtr, spec, cfg, g, inner, threads, key=(j,))
        chosen[j] = (cv.best_lambda_alpha, cv.best_lambda_beta)
        _, Ftr, Fte = split_features(X, train, test, spec, (j,))
        res = fit(dtr, Ftr, cfg.replace(lambda_alpha=chosen[j][0], lambda_beta=chosen[j][1]), threads)
        fold_nlpl[j] = -log_pseudolikelihood(res.params, _subset(data, test), Fte)
    vals = sorted(fold_nlpl.values())
    return NestedCvResult(math.fsum(vals) / len(vals), fold_nlpl, chosen)
