"""Covariate preprocessing: standardization, PCA and the random hidden layer.

The regressors seen by the mixture model are ``sigma(W' [1, psi])`` where
``psi`` are the leading principal components of the standardized
covariates and ``W`` is drawn once from ``Unif(-a, a)`` and never trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("logistic", "identity")


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    scales: np.ndarray

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.means.shape[0]:
            raise ValueError(f"expected {self.means.shape[0]} covariates, got {X.shape[-1]}")
        return (X - self.means) / self.scales


@dataclass(frozen=True)
class PcaProjection:
    loadings: np.ndarray  # p x q
    explained: np.ndarray  # variance fractions of all components
    q: int

    def __call__(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.loadings


def fit_standardizer(X) -> Standardizer:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two rows to standardize")
    means = X.mean(axis=0)
    scales = X.std(axis=0, ddof=1)
    const = np.flatnonzero(~(scales > 1e-12 * np.maximum(1.0, np.abs(means))))
    if const.size:
        raise ValueError(f"constant covariate column(s): {const.tolist()}")
    return Standardizer(means, scales)


def fit_pca(X, threshold: float = 0.95, q: int | None = None) -> tuple[Standardizer, PcaProjection]:
    """Standardize ``X`` and keep the fewest components explaining ``threshold``.

    ``q`` may be forced instead. Component signs are fixed so that the
    largest-magnitude loading of every column is positive.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    X = getattr(X, "X", X)
    std = fit_standardizer(X)
    Z = std(X)
    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    V = Vt.T
    pivot = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[pivot, np.arange(V.shape[1])])
    explained = s**2 / np.sum(s**2)
    if q is None:
        cum = np.cumsum(explained)
        q = int(np.searchsorted(cum, threshold - 1e-12) + 1)
        q = min(q, V.shape[1])
    if not 1 <= q <= V.shape[1]:
        raise ValueError(f"q={q} out of range")
    return std, PcaProjection(np.ascontiguousarray(V[:, :q]), explained, q)


def project(std: Standardizer, pca: PcaProjection, x) -> np.ndarray:
    """Principal-component scores of covariate row(s) ``x``."""
    return pca(std(x))


@dataclass(frozen=True)
class RandomFeatureMap:
    """Frozen hidden layer; row 0 of ``W`` multiplies the constant input."""

    W: np.ndarray
    a: float
    activation: str
    seed: int | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def q(self) -> int:
        return self.W.shape[0] - 1

    @property
    def n_h(self) -> int:
        return self.W.shape[1]

    def __call__(self, psi) -> np.ndarray:
        return hidden_features(self, psi)


def make_random_features(seed: int, q: int, n_h: int = 70, a: float = 0.5,
                         activation: str = "logistic") -> RandomFeatureMap:
    if n_h < 1:
        raise ValueError("n_h must be at least 1")
    if a < 0:
        raise ValueError("a must be non-negative")
    # Philox is counter-based, so draws do not depend on platform word size.
    rng = np.random.Generator(np.random.Philox(seed))
    W = rng.uniform(-a, a, size=(q + 1, n_h)) if a > 0 else np.zeros((q + 1, n_h))
    return RandomFeatureMap(W, float(a), activation, seed)


def make_linear_variant(q: int) -> RandomFeatureMap:
    """Identity hidden layer: the features are the ``q`` principal components."""
    if q < 1:
        raise ValueError("q must be at least 1")
    W = np.vstack([np.zeros((1, q)), np.eye(q)])
    return RandomFeatureMap(W, 0.0, "identity", None)


def hidden_features(rfm: RandomFeatureMap, psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.shape[-1] != rfm.q:
        raise ValueError(f"expected {rfm.q} principal components, got {psi.shape[-1]}")
    h = rfm.W[0] + psi @ rfm.W[1:]
    if rfm.activation == "logistic":
        return expit(h)
    return h


@dataclass(frozen=True)
class FeaturePipeline:
    standardizer: Standardizer | None
    pca: PcaProjection | None
    rfm: RandomFeatureMap

    @property
    def n_h(self) -> int:
        return self.rfm.n_h

    @property
    def q(self) -> int:
        return self.rfm.q

    def scores(self, X) -> np.ndarray:
        """Principal-component scores; identity when built on given scores."""
        X = np.asarray(X, dtype=float)
        if self.pca is None:
            return X
        return project(self.standardizer, self.pca, X)

    def transform(self, X) -> np.ndarray:
        return hidden_features(self.rfm, self.scores(X))

    def from_scores(self, psi) -> np.ndarray:
        return hidden_features(self.rfm, psi)

    def to_dict(self) -> dict:
        out = {
            "W": self.rfm.W.tolist(),
            "a": self.rfm.a,
            "n_h": self.rfm.n_h,
            "q": self.rfm.q,
            "activation": self.rfm.activation,
            "seed": self.rfm.seed,
        }
        if self.pca is not None:
            out.update(
                means=self.standardizer.means.tolist(),
                scales=self.standardizer.scales.tolist(),
                loadings=self.pca.loadings.tolist(),
                explained=self.pca.explained.tolist(),
            )
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "FeaturePipeline":
        rfm = RandomFeatureMap(np.array(doc["W"], dtype=float).reshape(doc["q"] + 1, doc["n_h"]),
                               float(doc["a"]), doc["activation"], doc.get("seed"))
        if "loadings" not in doc:
            return cls(None, None, rfm)
        loadings = np.array(doc["loadings"], dtype=float).reshape(-1, doc["q"])
        return cls(
            Standardizer(np.array(doc["means"]), np.array(doc["scales"])),
            PcaProjection(loadings, np.array(doc["explained"]), doc["q"]),
            rfm,
        )


def build_pipeline(X_train, *, seed: int, n_h: int = 70, a: float = 0.5,
                   activation: str = "logistic", threshold: float = 0.95,
                   q: int | None = None, use_pca: bool = True) -> FeaturePipeline:
    """Fit the full covariate-to-feature map on training covariates.

    With ``use_pca=False`` the inputs are taken as principal-component scores
    already. The identity activation builds the linear variant, whose
    features are the scores themselves.
    """
    X_train = np.asarray(getattr(X_train, "X", X_train), dtype=float)
    if use_pca:
        std, pca = fit_pca(X_train, threshold, q)
        q = pca.q
    else:
        std = pca = None
        q = X_train.shape[1] if q is None else q
        if q != X_train.shape[1]:
            raise ValueError("q must match the number of supplied scores")
    if activation == "identity":
        rfm = make_linear_variant(q)
    else:
        rfm = make_random_features(seed, q, n_h, a, activation)
    return FeaturePipeline(std, pca, rfm)
