"""Gaussian mixture of experts on fixed features.

Cluster ``k`` at time ``t`` has mean ``beta0[k] + beta[k]' f_t`` and
probability ``softmax(alpha0 + alpha' f_t)[k]``; covariances are constant
over time. The last cluster's gating coefficients are pinned at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, softmax

from .data import pool

LOG_2PI = math.log(2 * math.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class MoEParams:
    alpha0: np.ndarray  # K
    alpha: np.ndarray  # n_h x K
    beta0: np.ndarray  # K x d
    beta: np.ndarray  # K x n_h x d
    sigma: np.ndarray  # K x d x d

    @property
    def K(self) -> int:
        return self.alpha0.shape[0]

    @property
    def d(self) -> int:
        return self.beta0.shape[1]

    @property
    def n_h(self) -> int:
        return self.alpha.shape[0]

    def replace(self, **kw) -> "MoEParams":
        fields = dict(alpha0=self.alpha0, alpha=self.alpha, beta0=self.beta0,
                      beta=self.beta, sigma=self.sigma)
        fields.update(kw)
        return MoEParams(**fields)

    def means(self, feats) -> np.ndarray:
        """Cluster means, ``T x K x d``."""
        return self.beta0[None] + np.einsum("th,khd->tkd", np.atleast_2d(feats), self.beta)

    def logits(self, feats) -> np.ndarray:
        return self.alpha0[None] + np.atleast_2d(feats) @ self.alpha

    def log_probs(self, feats) -> np.ndarray:
        z = self.logits(feats)
        return z - logsumexp(z, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("alpha0", "alpha", "beta0", "beta", "sigma")}

    @classmethod
    def from_dict(cls, doc) -> "MoEParams":
        return cls(**{k: np.array(doc[k], dtype=float) for k in ("alpha0", "alpha", "beta0", "beta", "sigma")})

    @classmethod
    def zeros(cls, K: int, n_h: int, d: int) -> "MoEParams":
        return cls(np.zeros(K), np.zeros((n_h, K)), np.zeros((K, d)),
                   np.zeros((K, n_h, d)), np.broadcast_to(np.eye(d), (K, d, d)).copy())


@dataclass(frozen=True)
class ModelPrediction:
    mu: np.ndarray  # K x d
    pi: np.ndarray  # K


def predict(params: MoEParams, features) -> ModelPrediction:
    f = np.asarray(features, dtype=float)
    if f.shape != (params.n_h,):
        raise ValueError(f"expected {params.n_h} features, got shape {f.shape}")
    mu = params.beta0 + np.einsum("h,khd->kd", f, params.beta)
    pi = softmax(params.alpha0 + f @ params.alpha)
    return ModelPrediction(mu, pi)


def cholesky_factors(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("covariance is not positive definite") from None


def gaussian_logpdf(Y, mu, L) -> np.ndarray:
    """log N(Y | mu, L L') row-wise; ``mu`` broadcasts against ``Y``."""
    d = L.shape[0]
    R = np.atleast_2d(Y - mu)
    Z = solve_triangular(L, R.T, lower=True, check_finite=False)
    half_logdet = np.sum(np.log(np.diag(L)))
    return -0.5 * (d * LOG_2PI + np.sum(Z * Z, axis=0)) - half_logdet


def per_cluster_logdensity(params: MoEParams, y, k: int, features=None, chol=None) -> float:
    """log phi_d(y | mu_k, Sigma_k); ``features`` default to zero slopes' view.

    Pass ``chol`` to reuse a factorization of ``Sigma_k`` across calls.
    """
    if not 0 <= k < params.K:
        raise IndexError(f"cluster index {k} out of range")
    mu = params.beta0[k] if features is None else predict(params, features).mu[k]
    L = cholesky_factors(params.sigma[k]) if chol is None else chol
    return float(gaussian_logpdf(np.asarray(y, dtype=float), mu, L)[0])


def component_logdens(params: MoEParams, Y, tidx, feats) -> np.ndarray:
    """``M x K`` matrix of log pi_{k,t} + log phi(y_b | mu_{k,t}, Sigma_k)."""
    mu = params.means(feats)
    logpi = params.log_probs(feats)
    out = np.empty((Y.shape[0], params.K))
    for k in range(params.K):
        L = cholesky_factors(params.sigma[k])
        out[:, k] = gaussian_logpdf(Y, mu[tidx, k], L) + logpi[tidx, k]
    return out


def log_pseudolikelihood(params: MoEParams, data, feats, normalize: bool = True) -> float:
    """Biomass-weighted log pseudolikelihood, divided by total weight by default."""
    P = data if hasattr(data, "tidx") else pool(data)
    feats = np.asarray(feats, dtype=float)
    if feats.shape[0] != P.T:
        raise ValueError("feature rows must align with cytograms")
    if P.Y.shape[0] == 0:
        raise ValueError("empty dataset")
    ll = logsumexp(component_logdens(params, P.Y, P.tidx, feats), axis=1)
    total = math.fsum(P.c * ll)
    return total / P.total_weight if normalize else total


def nlpl(params: MoEParams, data, feats) -> float:
    return -log_pseudolikelihood(params, data, feats)
