import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmoe.features import build_pipeline
from flowmoe.interpret import (PrcRequest, Target, conditional_partial_response, partial_response,
                               sweep_grid)
from flowmoe.model import MoEParams, predict


def _model(rng, K, n_h, d=1, scale=1.0):
    alpha = np.hstack([rng.normal(scale=scale, size=(n_h, K - 1)), np.zeros((n_h, 1))])
    return MoEParams(np.append(rng.normal(size=K - 1), 0.0), alpha, rng.normal(size=(K, d)),
                     rng.normal(scale=scale, size=(K, n_h, d)), np.tile(np.eye(d), (K, 1, 1)))


@pytest.fixture
def psi(rng):
    return rng.normal(scale=2.0, size=(40, 3))


class TestTarget:
    def test_parse(self):
        assert Target.parse("mean:k=2,dim=1") == Target("mean", 1, 1)
        assert Target.parse("prob:k=1") == Target("probability", 0, 0)

    def test_parse_errors(self):
        for bad in ("median:k=1", "mean", "mean:dim=0"):
            with pytest.raises(ValueError):
                Target.parse(bad)


class TestPartialResponse:
    def test_zero_slopes_constant(self, rng, psi):
        pipe = build_pipeline(psi, seed=1, n_h=6, use_pca=False)
        p = MoEParams.zeros(3, 6, 1).replace(beta0=np.array([[1.0], [2.0], [3.0]]))
        base = psi.mean(axis=0)
        grid = sweep_grid(psi, 0, 11)
        mean = partial_response(p, pipe, PrcRequest(Target("mean", 1), 0, grid, base))
        prob = partial_response(p, pipe, PrcRequest(Target("probability", 2), 0, grid, base))
        np.testing.assert_array_equal(mean[:, 1], 2.0)
        np.testing.assert_allclose(prob[:, 1], 1 / 3, rtol=1e-15)
        np.testing.assert_array_equal(mean[:, 0], grid)

    def test_identity_mean_is_affine(self, rng, psi):
        pipe = build_pipeline(psi, seed=0, activation="identity", use_pca=False)
        p = _model(rng, 2, 3)
        grid = sweep_grid(psi, 1, 21)
        out = partial_response(p, pipe, PrcRequest(Target("mean", 0), 1, grid, psi.mean(axis=0)))
        slopes = np.diff(out[:, 1]) / np.diff(out[:, 0])
        # the slope is the coefficient on the swept score
        np.testing.assert_allclose(slopes, p.beta[0, 1, 0], rtol=1e-9)

    def test_pointwise_matches_predict(self, rng, psi):
        pipe = build_pipeline(psi, seed=5, n_h=7, use_pca=False)
        p = _model(rng, 3, 7, d=2)
        base = psi.mean(axis=0)
        grid = sweep_grid(psi, 2, 9)
        for target in (Target("mean", 2, 1), Target("probability", 1)):
            out = partial_response(p, pipe, PrcRequest(target, 2, grid, base))
            for g, v in out:
                s = base.copy()
                s[2] = g
                pred = predict(p, pipe.from_scores(s))
                want = pred.mu[2, 1] if target.kind == "mean" else pred.pi[1]
                assert abs(v - want) <= 1e-14 * max(1.0, abs(want))

    def test_probabilities_sum_to_one(self, rng, psi):
        pipe = build_pipeline(psi, seed=2, n_h=5, use_pca=False)
        p = _model(rng, 4, 5, scale=3.0)
        grid = sweep_grid(psi, 0, 31)
        base = psi.mean(axis=0)
        total = sum(partial_response(p, pipe, PrcRequest(Target("probability", k), 0, grid, base))[:, 1]
                    for k in range(4))
        np.testing.assert_allclose(total, 1.0, atol=1e-14)

    def test_through_pca(self, rng):
        X = rng.normal(size=(30, 5))
        pipe = build_pipeline(X, seed=3, n_h=4)
        p = _model(rng, 2, 4)
        psi = pipe.scores(X)
        out = partial_response(p, pipe, PrcRequest(Target("mean", 0), 0, sweep_grid(psi, 0, 5),
                                                   psi.mean(axis=0)))
        assert out.shape == (5, 2)

    def test_range_check(self, rng, psi):
        base = psi.mean(axis=0)
        lo, hi = psi[:, 0].min(), psi[:, 0].max()
        grid = np.linspace(lo - 1, hi, 5)
        with pytest.raises(ValueError, match="extrapolate"):
            PrcRequest(Target("mean", 0), 0, grid, base, observed_range=(lo, hi))
        PrcRequest(Target("mean", 0), 0, grid, base, observed_range=(lo, hi), extrapolate=True)

    def test_bad_indices(self, rng, psi):
        pipe = build_pipeline(psi, seed=1, n_h=3, use_pca=False)
        p = _model(rng, 2, 3)
        base = psi.mean(axis=0)
        with pytest.raises(IndexError):
            PrcRequest(Target("mean", 0), 3, np.zeros(2), base)
        with pytest.raises(IndexError):
            partial_response(p, pipe, PrcRequest(Target("mean", 2), 0, np.zeros(2), base))
        with pytest.raises(IndexError):
            partial_response(p, pipe, PrcRequest(Target("mean", 0, 1), 0, np.zeros(2), base))

    @given(st.integers(0, 2**32 - 1))
    def test_probability_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        psi = rng.normal(size=(10, 2))
        pipe = build_pipeline(psi, seed=seed, n_h=4, use_pca=False)
        p = _model(rng, 3, 4, scale=10.0)
        out = partial_response(p, pipe, PrcRequest(Target("probability", 0), 1, sweep_grid(psi, 1, 7),
                                                   psi.mean(axis=0)))
        assert np.all((out[:, 1] >= 0) & (out[:, 1] <= 1))


class TestConditional:
    def test_identity_curves_parallel(self, rng, psi):
        pipe = build_pipeline(psi, seed=0, activation="identity", use_pca=False)
        p = _model(rng, 2, 3)
        curves = conditional_partial_response(p, pipe, Target("mean", 0), psi.mean(axis=0),
                                              np.linspace(-1, 1, 11))
        assert sorted(curves) == [-6.0, -1.0, 4.0]
        shifts = [curves[c][:, 1] - curves[-6.0][:, 1] for c in curves]
        for s in shifts:
            assert np.ptp(s) < 1e-12

    def test_logistic_curves_not_parallel(self, rng, psi):
        pipe = build_pipeline(psi, seed=0, n_h=20, a=1.0, use_pca=False)
        p = _model(rng, 2, 20)
        curves = conditional_partial_response(p, pipe, Target("mean", 0), psi.mean(axis=0),
                                              np.linspace(-3, 3, 11))
        assert np.ptp(curves[4.0][:, 1] - curves[-6.0][:, 1]) > 1e-3

    def test_condition_value_applied(self, rng, psi):
        pipe = build_pipeline(psi, seed=0, activation="identity", use_pca=False)
        p = _model(rng, 2, 3)
        curves = conditional_partial_response(p, pipe, Target("mean", 1), psi.mean(axis=0), [0.0],
                                              values=(2.0,))
        s = psi.mean(axis=0)
        s[0], s[1] = 2.0, 0.0
        assert curves[2.0][0, 1] == pytest.approx(predict(p, pipe.from_scores(s)).mu[1, 0], rel=1e-14)
