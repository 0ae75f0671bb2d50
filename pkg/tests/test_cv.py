import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from flowmoe import cv as cvmod
from flowmoe.cv import (CvError, CvGrid, FeatureSpec, cross_validate, default_grid, make_folds,
                        nested_cv, split_features)
from flowmoe.data import BinnedCytogram
from flowmoe.em import FitConfig


def _blobs(rng, T, d=2, n=8):
    return [BinnedCytogram(t + 1, rng.normal(loc=0.1 * t, size=(n, d)), rng.uniform(0.5, 2, n))
            for t in range(T)]


def _pooled_gaussian_nlpl(train, test):
    Y = np.vstack([c.points for c in train])
    w = np.concatenate([c.weights for c in train])
    mu = w @ Y / w.sum()
    R = Y - mu
    S = (R * w[:, None]).T @ R / w.sum()
    Yt = np.vstack([c.points for c in test])
    wt = np.concatenate([c.weights for c in test])
    return -wt @ multivariate_normal(mu, S).logpdf(Yt) / wt.sum()


class TestFolds:
    def test_golden_assignment(self):
        f = make_folds(296, 20, 5)
        # times are 1-based; 101..120 is block 6 and lands back in fold 1
        want = set(range(1, 21)) | set(range(101, 121)) | set(range(201, 221))
        assert set(f.test_index(1) + 1) == want
        assert set(f.test_index(5) + 1) == set(range(81, 101)) | set(range(181, 201)) | set(range(281, 297))
        assert sorted(len(f.test_index(j)) for j in f.folds()) == [56, 60, 60, 60, 60]

    def test_singleton_blocks(self):
        f = make_folds(5, 1, 5)
        np.testing.assert_array_equal(f.assignment, [1, 2, 3, 4, 5])

    def test_invalid(self):
        for args in ((10, 20, 1), (10, 0, 5), (3, 1, 5)):
            with pytest.raises(ValueError):
                make_folds(*args)

    @given(st.integers(2, 400), st.integers(1, 30), st.integers(2, 10))
    def test_partition(self, T, b, n):
        if T < n:
            return
        f = make_folds(T, b, n)
        idx = np.concatenate([f.test_index(j) for j in f.folds()])
        np.testing.assert_array_equal(np.sort(idx), np.arange(T))
        for j in f.folds():
            assert len(np.intersect1d(f.train_index(j), f.test_index(j))) == 0
        # blocks stay whole
        blocks = np.arange(T) // b
        for blk in np.unique(blocks):
            assert len(np.unique(f.assignment[blocks == blk])) == 1


class TestGrid:
    def test_default_grid_span(self):
        g = default_grid(2.0, 0.5, n=5)
        assert g.lambda_alpha_values[0] == 2.0
        assert g.lambda_alpha_values[-1] == pytest.approx(2e-4)
        assert g.lambda_beta_values[-1] == pytest.approx(5e-5)

    def test_zero_max_replaced(self):
        assert default_grid(0.0, 1.0, n=2).lambda_alpha_values[0] == 1e-3

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            CvGrid((0.1, 0.2), (0.1,))
        with pytest.raises(ValueError):
            CvGrid((), (0.1,))


class TestCrossValidate:
    def test_single_cell_k1_oracle(self, rng):
        data = _blobs(rng, 10)
        X = rng.normal(size=(10, 3))
        folds = make_folds(10, 2, 5)
        cfg = FitConfig(K=1, r=0.0, restarts=1)
        res = cross_validate(data, X, FeatureSpec(n_h=4, use_pca=False), cfg, [(0.1, 0.1)], folds)
        assert len(res.table) == 5
        for _, _, j, v in res.table:
            tr = [data[i] for i in folds.train_index(j)]
            te = [data[i] for i in folds.test_index(j)]
            assert v == pytest.approx(_pooled_gaussian_nlpl(tr, te), rel=1e-8)
        vals = [v for *_, v in res.table]
        assert res.mean_nlpl[(0.1, 0.1)] == pytest.approx(math.fsum(vals) / 5, rel=1e-15)

    def test_ties_favor_larger_penalties(self, rng):
        data = _blobs(rng, 10)
        X = rng.normal(size=(10, 3))
        # with r=0 and K=1 every cell gives the same model
        grid = CvGrid((1.0, 0.1), (2.0, 0.2))
        res = cross_validate(data, X, FeatureSpec(n_h=3, use_pca=False), FitConfig(K=1, r=0.0, restarts=1),
                             grid, make_folds(10, 2, 5))
        assert (res.best_lambda_alpha, res.best_lambda_beta) == (1.0, 2.0)
        assert len(set(res.mean_nlpl.values())) == 1

    def test_duplicate_cells_identical(self, rng):
        data = _blobs(rng, 10, d=1)
        X = rng.normal(size=(10, 3))
        res = cross_validate(data, X, FeatureSpec(n_h=3, use_pca=False), FitConfig(K=2, restarts=2, max_iter=30),
                             [(0.01, 0.01), (0.01, 0.01)], make_folds(10, 2, 5))
        first = [v for a, b, j, v in res.table[:5]]
        second = [v for a, b, j, v in res.table[5:]]
        assert first == second

    def test_error_has_coordinates(self, rng, monkeypatch):
        data = _blobs(rng, 10)
        X = rng.normal(size=(10, 3))
        real = cvmod.fit

        def flaky(d, F, cfg, *a):
            if cfg.lambda_beta == 0.5 and len(d) == 8:
                raise FloatingPointError("boom")
            return real(d, F, cfg, *a)

        monkeypatch.setattr(cvmod, "fit", flaky)
        with pytest.raises(CvError, match=r"fold 1, lambda_alpha=0\.1, lambda_beta=0\.5"):
            cross_validate(data, X, FeatureSpec(n_h=3, use_pca=False), FitConfig(K=1, r=0.0, restarts=1),
                           [(0.1, 1.0), (0.1, 0.5)], make_folds(10, 2, 5))

    def test_mismatched_lengths(self, rng):
        with pytest.raises(ValueError):
            cross_validate(_blobs(rng, 9), rng.normal(size=(9, 2)), FeatureSpec(use_pca=False),
                           FitConfig(K=1), [(0.0, 0.0)], make_folds(10, 2, 5))


class TestFeatureSplits:
    def test_per_split_uses_training_rows_only(self, rng):
        X = rng.normal(size=(20, 4))
        train, test = np.arange(15), np.arange(15, 20)
        spec = FeatureSpec(n_h=5)
        pipe, Ftr, Fte = split_features(X, train, test, spec, (1,))
        np.testing.assert_allclose(pipe.standardizer.means, X[train].mean(axis=0))
        Xmod = X.copy()
        Xmod[test] += 100.0
        _, Ftr2, _ = split_features(Xmod, train, test, spec, (1,))
        np.testing.assert_array_equal(Ftr, Ftr2)

    def test_split_seeds_differ(self):
        spec = FeatureSpec(seed=3)
        assert spec.split_seed((1,)) != spec.split_seed((2,))
        assert spec.split_seed((1, 2)) == FeatureSpec(seed=3).split_seed((1, 2))


class TestNestedCv:
    def test_k1_matches_pooled_oracle(self, rng):
        data = _blobs(rng, 20)
        X = rng.normal(size=(20, 3))
        res = nested_cv(data, X, FeatureSpec(n_h=3, use_pca=False), FitConfig(K=1, r=0.0, restarts=1),
                        grid=[(0.1, 0.1)], block_size=2, n_folds=5)
        outer = make_folds(20, 2, 5)
        want = []
        for j in outer.folds():
            tr = [data[i] for i in outer.train_index(j)]
            te = [data[i] for i in outer.test_index(j)]
            want.append(_pooled_gaussian_nlpl(tr, te))
            assert res.fold_nlpl[j] == pytest.approx(want[-1], rel=1e-8)
        assert res.nlpl == pytest.approx(np.mean(want), rel=1e-8)
        assert set(res.chosen.values()) == {(0.1, 0.1)}
