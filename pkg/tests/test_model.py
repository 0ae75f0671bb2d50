import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowmoe.data import BinnedCytogram
from flowmoe.model import (MoEParams, NotPositiveDefinite, log_pseudolikelihood, nlpl,
                           per_cluster_logdensity, predict)

mpmath.mp.dps = 40


def random_params(rng, K, n_h, d, scale=1.0):
    S = rng.normal(size=(K, d, d))
    sigma = np.einsum("kij,klj->kil", S, S) + 0.5 * np.eye(d)
    alpha0 = np.append(rng.normal(size=K - 1), 0.0)
    alpha = np.hstack([rng.normal(scale=scale, size=(n_h, K - 1)), np.zeros((n_h, 1))])
    return MoEParams(alpha0, alpha, rng.normal(size=(K, d)), rng.normal(scale=scale, size=(K, n_h, d)), sigma)


def mp_logpdf(y, mu, sigma):
    d = len(y)
    S = mpmath.matrix(sigma.tolist())
    r = mpmath.matrix([mpmath.mpf(a) - mpmath.mpf(b) for a, b in zip(y, mu)])
    quad = (r.T * mpmath.inverse(S) * r)[0]
    return -0.5 * (d * mpmath.log(2 * mpmath.pi) + mpmath.log(mpmath.det(S)) + quad)


class TestPredict:
    def test_uniform_gating(self):
        p = MoEParams.zeros(3, 4, 2)
        np.testing.assert_allclose(predict(p, np.ones(4)).pi, [1 / 3] * 3, rtol=1e-15)

    def test_constant_expert(self, rng):
        p = random_params(rng, 2, 3, 2).replace(beta=np.zeros((2, 3, 2)))
        np.testing.assert_array_equal(predict(p, rng.normal(size=3)).mu, p.beta0)

    def test_softmax_extended_precision(self, rng):
        p = random_params(rng, 4, 5, 1, scale=3.0)
        f = rng.normal(size=5)
        logits = [mpmath.mpf(p.alpha0[k]) + mpmath.fsum(mpmath.mpf(f[h]) * mpmath.mpf(p.alpha[h, k])
                                                        for h in range(5)) for k in range(4)]
        den = mpmath.fsum(mpmath.exp(z) for z in logits)
        want = np.array([float(mpmath.exp(z) / den) for z in logits])
        np.testing.assert_allclose(predict(p, f).pi, want, rtol=0, atol=1e-14)

    def test_overflow_safe(self):
        p = MoEParams.zeros(2, 1, 1).replace(alpha0=np.array([1e4, 0.0]))
        np.testing.assert_allclose(predict(p, np.zeros(1)).pi, [1.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            predict(MoEParams.zeros(2, 3, 1), np.zeros(4))

    @given(st.integers(1, 5), st.floats(-50, 50), st.integers(0, 2**32 - 1))
    def test_shift_invariance(self, K, shift, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, K, 3, 1)
        f = rng.normal(size=3)
        q = p.replace(alpha0=p.alpha0 + shift)
        np.testing.assert_allclose(predict(q, f).pi, predict(p, f).pi, rtol=0, atol=1e-14)
        assert abs(predict(p, f).pi.sum() - 1) < 1e-12


class TestDensity:
    def test_1d_closed_form(self):
        p = MoEParams.zeros(1, 1, 1).replace(beta0=np.array([[2.0]]), sigma=np.array([[[4.0]]]))
        assert math.isclose(per_cluster_logdensity(p, [2.0], 0), -0.5 * math.log(2 * math.pi * 4),
                            rel_tol=1e-15)

    def test_2d_closed_form(self):
        p = MoEParams.zeros(1, 1, 2)
        got = per_cluster_logdensity(p, [3.0, 4.0], 0)
        assert math.isclose(got, -math.log(2 * math.pi) - 12.5, rel_tol=1e-15)

    def test_3d_extended_precision(self, rng):
        p = random_params(rng, 2, 2, 3)
        y = rng.normal(size=3)
        want = float(mp_logpdf(y, p.beta0[1], p.sigma[1]))
        assert abs(per_cluster_logdensity(p, y, 1) - want) <= 1e-11 * max(1.0, abs(want))

    def test_not_pd(self):
        p = MoEParams.zeros(1, 1, 2).replace(sigma=np.array([[[1.0, 2.0], [2.0, 1.0]]]))
        with pytest.raises(NotPositiveDefinite):
            per_cluster_logdensity(p, [0.0, 0.0], 0)

    def test_index_error(self):
        with pytest.raises(IndexError):
            per_cluster_logdensity(MoEParams.zeros(2, 1, 1), [0.0], 2)


def _dataset(rng, T, d, n):
    return [BinnedCytogram(t + 1, rng.normal(size=(n, d)), rng.uniform(0.2, 3.0, n)) for t in range(T)]


class TestPseudolikelihood:
    def test_standard_normal_mode(self):
        data = [BinnedCytogram(1, [[0.0]], [1.0])]
        got = log_pseudolikelihood(MoEParams.zeros(1, 1, 1), data, np.zeros((1, 1)))
        assert math.isclose(got, -0.5 * math.log(2 * math.pi), rel_tol=1e-15)
        assert round(got, 5) == -0.91894

    def test_weight_scaling_invariant(self, rng):
        p = random_params(rng, 2, 3, 2)
        data = _dataset(rng, 4, 2, 6)
        feats = rng.uniform(size=(4, 3))
        doubled = [BinnedCytogram(c.t, c.points, 2 * c.weights) for c in data]
        a = log_pseudolikelihood(p, data, feats)
        b = log_pseudolikelihood(p, doubled, feats)
        assert abs(a - b) <= 1e-14 * abs(a)

    def test_brute_force_oracle(self, rng):
        K, d, T = 2, 2, 5
        p = random_params(rng, K, 3, d, scale=0.5)
        data = _dataset(rng, T, d, 10)
        feats = rng.uniform(size=(T, 3))
        total = mpmath.mpf(0)
        C = mpmath.mpf(0)
        for t, c in enumerate(data):
            pred = predict(p, feats[t])
            for y, w in zip(c.points, c.weights):
                dens = mpmath.fsum(mpmath.mpf(pred.pi[k]) * mpmath.exp(mp_logpdf(y, pred.mu[k], p.sigma[k]))
                                   for k in range(K))
                total += mpmath.mpf(w) * mpmath.log(dens)
                C += mpmath.mpf(w)
        want = float(total / C)
        assert abs(log_pseudolikelihood(p, data, feats) - want) <= 1e-10 * abs(want)
        assert nlpl(p, data, feats) == -log_pseudolikelihood(p, data, feats)

    def test_underflow_stays_finite(self):
        p = MoEParams.zeros(2, 1, 1).replace(beta0=np.array([[0.0], [1.0]]),
                                             sigma=np.full((2, 1, 1), 1e-6))
        data = [BinnedCytogram(1, [[1e4]], [1.0])]
        assert np.isfinite(log_pseudolikelihood(p, data, np.zeros((1, 1))))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            log_pseudolikelihood(MoEParams.zeros(1, 1, 1), [BinnedCytogram(1, np.zeros((0, 1)), [])],
                                 np.zeros((1, 1)))

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_translation_equivariance(self, K, d, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, K, 2, d)
        data = _dataset(rng, 3, d, 5)
        feats = rng.uniform(size=(3, 2))
        v = rng.normal(scale=5, size=d)
        moved = [BinnedCytogram(c.t, c.points + v, c.weights) for c in data]
        q = p.replace(beta0=p.beta0 + v)
        a = log_pseudolikelihood(p, data, feats)
        b = log_pseudolikelihood(q, moved, feats)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(a))

    def test_params_roundtrip(self, rng):
        p = random_params(rng, 3, 2, 2)
        q = MoEParams.from_dict(p.to_dict())
        for name in ("alpha0", "alpha", "beta0", "beta", "sigma"):
            np.testing.assert_array_equal(getattr(p, name), getattr(q, name))
