"""Pseudo-synthetic two-cluster cytogram series driven by principal components.

Cluster 1's mean and probability follow one of four functional forms of
PC1/PC4 (mean) and PC1/PC2 (logit probability); cluster 2 sits at a fixed
offset ``delta`` from cluster 1's time-averaged mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Cytogram, CovariateMatrix, pool
from .features import fit_pca

KINDS = ("linear", "interaction", "quadratic", "logistic")
CONFIGS = ("both_linear", "nonlinear_probability", "nonlinear_mean")
MAX_DELTA = 0.95


def mean_function(kind: str, psi1, psi4):
    """Cluster-1 mean as a function of PC1 and PC4."""
    psi1 = np.asarray(psi1, dtype=float)
    psi4 = np.asarray(psi4, dtype=float)
    if kind == "linear":
        return 1 + 0.015 * psi1 + 0.035 * psi4
    if kind == "interaction":
        return 1.05707 + 0.015 * psi1 + 0.02 * psi4 + 0.003 * psi1 * psi4
    if kind == "quadratic":
        return 1.030392 + 0.015 * psi1 + 0.01 * psi4 * np.abs(psi4)
    if kind == "logistic":
        return 1.089606 - 0.15 * expit(-psi1) + 0.035 * psi4
    raise ValueError(f"unknown mean kind {kind!r}")


def prob_logit(kind: str, psi1, psi2):
    psi1 = np.asarray(psi1, dtype=float)
    psi2 = np.asarray(psi2, dtype=float)
    if kind == "linear":
        return -0.4 * psi1 + 0.1 * psi2
    if kind == "interaction":
        return -0.4 * psi1 + 0.02 * psi1 * psi2
    if kind == "quadratic":
        return -0.4 * psi1 - 0.05 * psi2**2
    if kind == "logistic":
        # (1 + exp(psi1))^-1 == expit(-psi1)
        return -2 + 4.5 * expit(-psi1) + 0.1 * psi2
    raise ValueError(f"unknown probability kind {kind!r}")


def prob_function(kind: str, psi1, psi2):
    """Cluster-1 probability: inverse logit of the chosen logit form."""
    return expit(prob_logit(kind, psi1, psi2))


@dataclass(frozen=True)
class SimScenario:
    config: str = "both_linear"
    delta: float = 0.0
    mean_kind: str | None = None
    prob_kind: str | None = None
    n_per_time: int = 1000
    noise_sd: float = 0.2
    seed: int = 0
    delta_sign: int = 1

    def __post_init__(self):
        cfg = self.config.replace("-", "_")
        cfg = {"nonlinear_prob": "nonlinear_probability"}.get(cfg, cfg)
        if cfg not in CONFIGS:
            raise ValueError(f"unknown configuration {self.config!r}")
        mean_kind, prob_kind = self.mean_kind, self.prob_kind
        if cfg == "both_linear":
            mean_kind, prob_kind = self._fixed(mean_kind, "mean"), self._fixed(prob_kind, "prob")
        elif cfg == "nonlinear_probability":
            mean_kind = self._fixed(mean_kind, "mean")
            prob_kind = prob_kind or "interaction"
        else:
            prob_kind = self._fixed(prob_kind, "prob")
            mean_kind = mean_kind or "interaction"
        for k in (mean_kind, prob_kind):
            if k not in KINDS:
                raise ValueError(f"unknown kind {k!r}")
        if cfg == "nonlinear_probability" and prob_kind == "linear":
            raise ValueError("nonlinear_probability needs a nonlinear probability kind")
        if cfg == "nonlinear_mean" and mean_kind == "linear":
            raise ValueError("nonlinear_mean needs a nonlinear mean kind")
        if not 0 <= self.delta <= MAX_DELTA + 1e-12:
            raise ValueError(f"delta must lie in [0, {MAX_DELTA}]")
        if self.delta_sign not in (1, -1):
            raise ValueError("delta_sign must be +1 or -1")
        if self.n_per_time < 0 or self.noise_sd <= 0:
            raise ValueError("need n_per_time >= 0 and noise_sd > 0")
        object.__setattr__(self, "config", cfg)
        object.__setattr__(self, "mean_kind", mean_kind)
        object.__setattr__(self, "prob_kind", prob_kind)

    @staticmethod
    def _fixed(kind, what):
        if kind not in (None, "linear"):
            raise ValueError(f"this configuration fixes the {what} function to linear")
        return "linear"


@dataclass(frozen=True)
class SimDataset:
    cytograms: list
    mu1: np.ndarray  # T
    mu2: float
    pi1: np.ndarray  # T
    psi: np.ndarray
    noise_sd: float

    @property
    def T(self) -> int:
        return len(self.mu1)

    def truth_rows(self):
        for t, (m1, p1) in enumerate(zip(self.mu1, self.pi1), start=1):
            yield t, float(m1), float(self.mu2), float(p1)


def truth(scenario: SimScenario, psi) -> tuple[np.ndarray, float, np.ndarray]:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] == 0:
        raise ValueError("psi must be a non-empty T x q matrix")
    if psi.shape[1] < 4:
        raise ValueError("psi needs at least four principal components")
    mu1 = mean_function(scenario.mean_kind, psi[:, 0], psi[:, 3])
    pi1 = prob_function(scenario.prob_kind, psi[:, 0], psi[:, 1])
    mu2 = float(np.mean(mu1)) + scenario.delta_sign * scenario.delta
    return mu1, mu2, pi1


def generate(scenario: SimScenario, psi) -> SimDataset:
    """Draw ``n_per_time`` unit-weight particles per time from the two-cluster model.

    Each time slot has its own generator seeded by ``(seed, t)``, so slots can
    be produced independently and in any order.
    """
    mu1, mu2, pi1 = truth(scenario, psi)
    n = scenario.n_per_time
    cytos = []
    for t in range(len(mu1)):
        rng = np.random.default_rng([scenario.seed, t])
        first = rng.random(n) < pi1[t]
        centers = np.where(first, mu1[t], mu2)
        y = centers + scenario.noise_sd * rng.standard_normal(n)
        cytos.append(Cytogram(t + 1, y[:, None], np.ones(n)))
    return SimDataset(cytos, mu1, mu2, pi1, np.asarray(psi, dtype=float), scenario.noise_sd)


def oracle_log_pseudolikelihood(ds: SimDataset, data) -> float:
    """Normalized log pseudolikelihood of ``data`` under the generating model.

    ``data`` must be aligned with ``ds`` time slots (same length, same order).
    """
    P = data if hasattr(data, "tidx") else pool(data)
    if P.T != ds.T:
        raise ValueError("data must cover the simulated time slots")
    y = P.Y[:, 0]
    s = ds.noise_sd
    l1 = np.log(ds.pi1[P.tidx]) - 0.5 * ((y - ds.mu1[P.tidx]) / s) ** 2
    l2 = np.log1p(-ds.pi1[P.tidx]) - 0.5 * ((y - ds.mu2) / s) ** 2
    ll = np.logaddexp(l1, l2) - math.log(s) - 0.5 * math.log(2 * math.pi)
    return math.fsum(P.c * ll) / P.total_weight


def signal_grid(n_points: int = 20) -> np.ndarray:
    """Equally spaced signal sizes from 0 to 0.95 inclusive."""
    if n_points < 2:
        raise ValueError("need at least two grid points")
    return np.linspace(0.0, MAX_DELTA, n_points)


def synthetic_covariates(T: int = 296, p: int = 37, seed: int = 2017) -> CovariateMatrix:
    """A stand-in hourly covariate matrix with cruise-like structure.

    Latent drivers: a latitude track with a sharp transition zone, two slow
    physical processes, and a diel sunlight cycle with lagged copies. Each
    covariate mixes one driver family plus noise.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=float)
    # northbound then southbound track
    turn = 0.55 * T
    lat = np.where(t < turn, 21 + 21 * t / turn, 42 - 10 * (t - turn) / (T - turn))
    front = np.tanh((lat - 33.0) / 1.5)

    def smooth_noise(scale):
        x = rng.standard_normal(T + 200)
        k = np.exp(-0.5 * (np.arange(-100, 101) / scale) ** 2)
        return np.convolve(x, k / k.sum(), mode="same")[100:100 + T]

    slow = [smooth_noise(30.0), smooth_noise(12.0)]
    slow = [s / s.std() for s in slow]

    def par(lag):
        return np.maximum(0.0, np.sin(2 * np.pi * (t - 6 - lag) / 24.0))

    families = (
        [lambda: front + 0.3 * (lat - lat.mean()) / lat.std()] * 16
        + [lambda: slow[0]] * 7
        + [lambda: slow[1]] * 6
        + [lambda lag=lag: par(lag) for lag in (0, 3, 6, 9, 12)]
        + [lambda: rng.standard_normal(T)] * 3
    )
    cols = []
    for j in range(p):
        base = families[j % len(families)]()
        cols.append(rng.uniform(0.5, 2.0) * rng.choice([-1, 1]) * base
                    + 0.25 * rng.standard_normal(T) + rng.normal(0, 3))
    return CovariateMatrix(np.arange(1, T + 1), np.column_stack(cols))


def synthetic_scores(T: int = 296, q: int = 9, seed: int = 2017) -> np.ndarray:
    """Principal-component scores of :func:`synthetic_covariates` (``T x q``)."""
    cov = synthetic_covariates(T, seed=seed)
    std, pca = fit_pca(cov.X, q=q)
    return pca(std(cov.X))
