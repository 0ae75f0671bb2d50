"""Penalized, constrained EM for the biomass-weighted mixture of experts.

Minimizes

    -(1/C) sum_t sum_b c_b log sum_k pi_kt phi(y_b | mu_kt, Sigma_k)
        + lambda_alpha sum_k |alpha_k|_1 + lambda_beta sum_k |beta_k|_1

subject to |beta_k' f_t|_2 <= r for every cluster and time, where C is the
total weight. Each M-step block keeps its update only if the block's share
of the EM surrogate does not increase, so the objective never goes up.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.special import logsumexp, softmax

from .data import DataError, pool
from .model import MoEParams, component_logdens

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-10
EMPTY_CLUSTER_FRACTION = 1e-8


class SolverError(RuntimeError):
    """An inner solver failed (e.g. line search could not find a step)."""


class SubsolverWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitConfig:
    K: int = 2
    r: float = math.inf
    lambda_alpha: float = 0.0
    lambda_beta: float = 0.0
    tol: float = 1e-6
    max_iter: int = 300
    restarts: int = 10
    seed: int = 0
    subsolver_tol: float = 1e-6
    subsolver_max_iter: int = 300

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not (self.r >= 0):
            raise ValueError("r must be non-negative")
        if self.lambda_alpha < 0 or self.lambda_beta < 0:
            raise ValueError("penalties must be non-negative")
        if not (self.tol > 0 and self.subsolver_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.restarts < 1 or self.subsolver_max_iter < 1:
            raise ValueError("iteration counts and restarts must be positive")

    def replace(self, **kw) -> "FitConfig":
        return FitConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["r"] = "inf" if math.isinf(self.r) else self.r
        return out

    @classmethod
    def from_dict(cls, doc) -> "FitConfig":
        doc = dict(doc)
        doc["r"] = float(doc["r"])
        return cls(**doc)


@dataclass
class FitResult:
    params: MoEParams
    objective_trace: np.ndarray
    converged: bool
    restart_index: int
    deviation_trace: np.ndarray  # max_{k,t} |beta_k' f_t| after each iteration
    restart_objectives: np.ndarray = field(default_factory=lambda: np.zeros(0))
    subsolver_warnings: int = 0
    rescues: int = 0

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])

    @property
    def n_iter(self) -> int:
        return len(self.objective_trace) - 1


@dataclass(frozen=True)
class EStep:
    gamma: np.ndarray  # M x K responsibilities
    loglik: np.ndarray  # M, log mixture density per bin
    nlpl: float  # -(1/C) sum c_b loglik_b


@dataclass(frozen=True)
class Stats:
    """Weight-summed responsibilities ``W`` (T x K) and weighted means ``ybar`` (T x K x d)."""

    W: np.ndarray
    ybar: np.ndarray
    C: float


# --------------------------------------------------------------------------
# E-step and sufficient statistics


def e_step(params: MoEParams, data, feats) -> EStep:
    P = data if hasattr(data, "tidx") else pool(data)
    logd = component_logdens(params, P.Y, P.tidx, feats)
    ll = logsumexp(logd, axis=1)
    gamma = np.exp(logd - ll[:, None])
    gamma /= gamma.sum(axis=1, keepdims=True)
    return EStep(gamma, ll, -math.fsum(P.c * ll) / P.total_weight)


def sufficient_stats(P, gamma) -> Stats:
    K = gamma.shape[1]
    d = P.Y.shape[1]
    cg = P.c[:, None] * gamma
    W = np.empty((P.T, K))
    S1 = np.empty((P.T, K, d))
    for k in range(K):
        W[:, k] = np.bincount(P.tidx, weights=cg[:, k], minlength=P.T)
        for j in range(d):
            S1[:, k, j] = np.bincount(P.tidx, weights=cg[:, k] * P.Y[:, j], minlength=P.T)
    with np.errstate(invalid="ignore", divide="ignore"):
        ybar = np.where(W[..., None] > 0, S1 / W[..., None], 0.0)
    return Stats(W, ybar, P.total_weight)


def penalized_objective(nlpl: float, params: MoEParams, cfg: FitConfig) -> float:
    pen = 0.0
    if cfg.lambda_alpha:
        pen += cfg.lambda_alpha * np.abs(params.alpha).sum()
    if cfg.lambda_beta:
        pen += cfg.lambda_beta * np.abs(params.beta).sum()
    return nlpl + pen


def max_deviation(params: MoEParams, feats) -> float:
    dev = np.einsum("th,khd->tkd", feats, params.beta)
    return float(np.sqrt((dev**2).sum(axis=2)).max()) if dev.size else 0.0


# --------------------------------------------------------------------------
# Gating M-step: L1-penalized multinomial logistic regression


def _free_lse(z):
    """log(1 + sum_k exp(z_k)) row-wise: logsumexp with the anchored zero logit."""
    m = np.maximum(z.max(axis=1), 0.0)
    return m + np.log(np.exp(-m) + np.exp(z - m[:, None]).sum(axis=1))


def gating_smooth(a0, A, G, feats, C) -> float:
    z = a0 + feats @ A
    n = G.sum(axis=1)
    return -(np.sum(G[:, :-1] * z) - np.dot(n, _free_lse(z))) / C


def gating_objective(a0, A, G, feats, C, lam) -> float:
    """Smooth part plus penalty; ``a0`` and ``A`` exclude the anchored last cluster."""
    return gating_smooth(a0, A, G, feats, C) + lam * np.abs(A).sum()


def gating_gradient(a0, A, G, feats, C):
    """Smooth value and gradients in (a0, A) of the gating block."""
    z = a0 + feats @ A
    n = G.sum(axis=1)
    lse = _free_lse(z)
    gz = -(G[:, :-1] - n[:, None] * np.exp(z - lse[:, None])) / C
    smooth = -(np.sum(G[:, :-1] * z) - np.dot(n, lse)) / C
    return smooth, gz.sum(axis=0), feats.T @ gz


def _soft(x, thr):
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


@dataclass
class GatingSolution:
    alpha0: np.ndarray
    alpha: np.ndarray
    iterations: int
    converged: bool
    residual: float
    step: float


def gating_fista(G, feats, lambda_alpha: float, C: float | None = None,
                 warm_start=None, tol: float = 1e-8, max_iter: int = 1000,
                 step: float | None = None) -> GatingSolution:
    """Proximal gradient (FISTA with monotone restart and backtracking).

    ``G`` is the ``T x K`` matrix of weight-summed responsibilities. Returns
    full ``alpha0`` (K) and ``alpha`` (n_h x K) with the last column zero.

    Iterates run on centered, unit-variance features with per-coordinate
    thresholds, which is the same problem in better-conditioned
    coordinates. Stops when the max-abs gradient mapping, measured in the
    original coordinates, falls below ``tol``.
    """
    G = np.asarray(G, dtype=float)
    feats = np.asarray(feats, dtype=float)
    T, K = G.shape
    n_h = feats.shape[1]
    C = float(G.sum()) if C is None else C
    if K == 1:
        return GatingSolution(np.zeros(1), np.zeros((n_h, 1)), 0, True, 0.0, 1.0)
    fbar = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Fs = (feats - fbar) / scale
    lam = float(lambda_alpha)
    thr = lam / scale[:, None]

    if warm_start is None:
        A = np.zeros((n_h, K - 1))
        a0 = np.zeros(K - 1)
    else:
        w0, wA = np.asarray(warm_start[0], float), np.asarray(warm_start[1], float)
        a0 = w0[:-1] - w0[-1]
        A = wA[:, :-1] - wA[:, -1:]
    # scaled coordinates: B = scale * A, b0 = a0 + fbar @ A
    x0, xB = a0 + fbar @ A, A * scale[:, None]

    if step is None:
        n_max = G.sum(axis=1).max() / C
        step = 1.0 / max(0.5 * n_max * (T + np.linalg.norm(Fs, 2) ** 2), 1e-300)

    def penalty(B):
        return float(np.sum(thr * np.abs(B)))

    Fx = gating_smooth(x0, xB, G, Fs, C) + penalty(xB)
    y0, yB = x0.copy(), xB.copy()
    theta = 1.0
    converged = False
    resid = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        fy, g0, gB = gating_gradient(y0, yB, G, Fs, C)
        t = step
        for _ in range(100):
            n0 = y0 - t * g0
            nB = _soft(yB - t * gB, t * thr)
            d0, dB = n0 - y0, nB - yB
            fn = gating_smooth(n0, nB, G, Fs, C)
            quad = fy + np.sum(g0 * d0) + np.sum(gB * dB) + (np.sum(d0**2) + np.sum(dB**2)) / (2 * t)
            if fn <= quad + 1e-14 * abs(fy):
                break
            t *= 0.5
        else:
            raise SolverError("gating line search failed to find a descent step")
        step = t
        # gradient mapping in original coordinates
        dA = dB / scale[:, None]
        da0 = d0 - fbar @ dA
        resid = max(np.abs(da0).max(initial=0.0), np.abs(dA).max(initial=0.0)) / t
        Fn = fn + penalty(nB)
        if Fn > Fx:
            theta = 1.0
            y0, yB = x0.copy(), xB.copy()
            if resid < tol:
                converged = True
                break
            continue
        theta_n = 0.5 * (1 + math.sqrt(1 + 4 * theta * theta))
        mom = (theta - 1) / theta_n
        y0 = n0 + mom * (n0 - x0)
        yB = nB + mom * (nB - xB)
        x0, xB, Fx = n0, nB, Fn
        theta = theta_n
        step = min(step * 1.1, 1e12)
        if resid < tol:
            converged = True
            break
    A = xB / scale[:, None]
    a0 = x0 - fbar @ A
    alpha0 = np.append(a0, 0.0)
    alpha = np.hstack([A, np.zeros((n_h, 1))])
    return GatingSolution(alpha0, alpha, it, converged, float(resid), step)


def gating_kkt_residual(a0, A, G, feats, C, lam) -> float:
    """Max violation of the L1 optimality conditions (intercepts unpenalized)."""
    _, g0, gA = gating_gradient(a0, A, G, feats, C)
    viol = np.where(A != 0, np.abs(gA + lam * np.sign(A)), np.maximum(np.abs(gA) - lam, 0.0))
    return float(max(np.abs(g0).max(initial=0.0), viol.max(initial=0.0)))


def _gating_hessian(z, n, X, C):
    """Hessian of the smooth gating part in theta = [a0; A] (column-major blocks)."""
    p = np.exp(z - _free_lse(z)[:, None])
    m = z.shape[1]
    p1 = X.shape[1]
    H = np.empty((m * p1, m * p1))
    for j in range(m):
        for l in range(j, m):
            w = n * (p[:, j] * ((j == l) - p[:, l]))
            blk = (X.T * w) @ X / C
            H[j * p1:(j + 1) * p1, l * p1:(l + 1) * p1] = blk
            H[l * p1:(l + 1) * p1, j * p1:(j + 1) * p1] = blk.T
    return H


def _qp_objective(H, b, lam, x):
    return float(b @ x + 0.5 * x @ (H @ x) + lam @ np.abs(x))


def _lasso_qp(H, b, lam, x, tol, max_iter=500):
    """Active-set (feature-sign) solver for min b'x + x'Hx/2 + sum lam_i |x_i|.

    Coordinates with ``lam_i == 0`` stay in the active set throughout.
    """
    x = x.copy()
    free = lam == 0
    obj = _qp_objective(H, b, lam, x)
    for _ in range(max_iter):
        g = b + H @ x
        active = free | (x != 0)
        theta = np.sign(x)
        bad = np.abs(g + lam * theta)[active]
        if bad.max(initial=0.0) <= tol:
            viol = np.where(active, -np.inf, np.abs(g) - lam)
            i = int(np.argmax(viol))
            if viol[i] <= tol:
                break
            active[i] = True
            theta[i] = -np.sign(g[i])
        S = np.flatnonzero(active)
        rhs = -(b[S] + lam[S] * theta[S])
        try:
            xs = np.linalg.solve(H[np.ix_(S, S)], rhs)
        except np.linalg.LinAlgError:
            xs = np.linalg.lstsq(H[np.ix_(S, S)], rhs, rcond=None)[0]
        # discrete line search over sign changes between x_S and xs
        cur = x[S]
        moving = (cur != 0) & (np.sign(xs) != np.sign(cur))
        ts = cur[moving] / (cur[moving] - xs[moving])
        best_x, best_obj = None, obj
        for t, j in list(zip(ts, np.flatnonzero(moving))) + [(1.0, None)]:
            cand = x.copy()
            cand[S] = cur + t * (xs - cur)
            if j is not None:
                cand[S[j]] = 0.0
            val = _qp_objective(H, b, lam, cand)
            if val < best_obj:
                best_x, best_obj = cand, val
        if best_x is None:
            break
        x, obj = best_x, best_obj
    return x


def m_step_gating(G, feats, lambda_alpha: float, C: float | None = None,
                  warm_start=None, tol: float = 1e-8, max_iter: int = 100,
                  step: float | None = None) -> GatingSolution:
    """L1-penalized multinomial logistic regression by proximal Newton.

    ``G`` is the ``T x K`` matrix of weight-summed responsibilities. Each
    step solves the penalized local quadratic model by coordinate descent and
    backtracks on the true objective, so iterates never get worse than the
    warm start. Stops when the L1 optimality residual is below ``tol``; a
    failed line search hands over to :func:`gating_fista`. Returns full
    ``alpha0`` (K) and ``alpha`` (n_h x K) with the last column zero.
    """
    G = np.asarray(G, dtype=float)
    feats = np.asarray(feats, dtype=float)
    T, K = G.shape
    n_h = feats.shape[1]
    C = float(G.sum()) if C is None else C
    if K == 1:
        return GatingSolution(np.zeros(1), np.zeros((n_h, 1)), 0, True, 0.0, 1.0)
    m = K - 1
    lam = float(lambda_alpha)
    if warm_start is None:
        a0, A = np.zeros(m), np.zeros((n_h, m))
    else:
        w0, wA = np.asarray(warm_start[0], float), np.asarray(warm_start[1], float)
        a0, A = w0[:-1] - w0[-1], wA[:, :-1] - wA[:, -1:]
    X = np.hstack([np.ones((T, 1)), feats])
    n = G.sum(axis=1)
    pen = np.tile(np.r_[0.0, np.full(n_h, lam)], m)

    def pack(a0, A):
        return np.vstack([a0[None], A]).T.ravel()

    def unpack(th):
        M = th.reshape(m, n_h + 1).T
        return M[0].copy(), M[1:].copy()

    def total(a0, A):
        return gating_smooth(a0, A, G, feats, C) + lam * np.abs(A).sum()

    theta = pack(a0, A)
    obj = total(a0, A)
    resid = gating_kkt_residual(a0, A, G, feats, C, lam)
    converged = resid < tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        z = a0 + feats @ A
        _, g0, gA = gating_gradient(a0, A, G, feats, C)
        g = pack(g0, gA)
        H = _gating_hessian(z, n, X, C)
        H[np.diag_indices_from(H)] += 1e-12
        target = _lasso_qp(H, g - H @ theta, pen, theta, tol=0.1 * tol)
        D = target - theta
        decrease = g @ D + np.sum(pen * (np.abs(target) - np.abs(theta)))
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = theta + t * D
            c0, cA = unpack(cand)
            cobj = total(c0, cA)
            if cobj <= obj + 1e-4 * t * min(decrease, 0.0):
                accepted = True
                break
            t *= 0.5
        if not accepted or cobj > obj:
            sol = gating_fista(G, feats, lam, C, warm_start=(np.append(a0, 0.0),
                               np.hstack([A, np.zeros((n_h, 1))])), tol=tol, max_iter=1000, step=step)
            return GatingSolution(sol.alpha0, sol.alpha, it + sol.iterations, sol.converged,
                                  sol.residual, sol.step)
        theta, a0, A, obj = cand, c0, cA, cobj
        resid = gating_kkt_residual(a0, A, G, feats, C, lam)
        converged = resid < tol
    return GatingSolution(np.append(a0, 0.0), np.hstack([A, np.zeros((n_h, 1))]), it, converged,
                          resid, step if step is not None else 1.0)


# --------------------------------------------------------------------------
# Mean M-step: ball-constrained weighted lasso, solved by ADMM


@dataclass
class AdmmState:
    """Splitting variables carried across EM iterations for warm starts."""

    z: np.ndarray
    w: np.ndarray | None
    u: np.ndarray
    v: np.ndarray | None
    rho: float


@dataclass
class MeanSolution:
    beta0: np.ndarray
    beta: np.ndarray
    converged: bool
    iterations: int
    state: AdmmState | None = None


def mean_block_objective(beta0, beta, W, ybar, feats, Sinv, C, lam) -> float:
    """(1/2C) sum_t W_t |ybar_t - mu_t|^2_{Sinv} + lam |beta|_1."""
    R = ybar - beta0 - feats @ beta
    quad = np.einsum("td,de,te->t", R, Sinv, R)
    return 0.5 * float(np.sum(W * quad)) / C + lam * float(np.abs(beta).sum())


def mean_smooth_gradient(beta, W, ybar_c, feats_c, Sinv, C):
    """Gradient in ``beta`` of the centered quadratic (intercept profiled out)."""
    R = ybar_c - feats_c @ beta
    return -(feats_c.T @ (W[:, None] * R)) @ Sinv / C


def _row_norms(M):
    return np.sqrt(np.einsum("td,td->t", M, M))


def _scale_to_ball(beta, feats, r):
    if math.isinf(r):
        return beta
    dev = _row_norms(feats @ beta).max(initial=0.0)
    while dev > r:
        beta = beta * (r / dev) * (1 - 4e-16)
        dev = _row_norms(feats @ beta).max(initial=0.0)
    return beta


RELAX = 1.6


def m_step_means(W, ybar, feats, sigma, lambda_beta: float, r: float, C: float,
                 warm_start=None, state: AdmmState | None = None,
                 tol: float = 1e-8, max_iter: int = 1000) -> MeanSolution:
    """Update one cluster's intercept and slopes.

    ``W`` (T) are weight-summed responsibilities, ``ybar`` (T x d) the
    weighted mean responses. The intercept is profiled out, and the slopes
    solve the ball-constrained weighted lasso by over-relaxed ADMM with a
    lasso copy ``z = beta`` and a deviation copy ``w_t = beta' f_t``
    projected onto the radius-``r`` ball. The returned ``beta`` satisfies the
    constraint exactly; ``warm_start`` ``(beta0, beta)`` is kept instead when
    the update scores worse.
    """
    W = np.asarray(W, dtype=float)
    feats = np.asarray(feats, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    T, n_h = feats.shape
    d = ybar.shape[1]
    lam = float(lambda_beta)
    if W.sum() <= 0:
        if warm_start is None:
            return MeanSolution(np.zeros(d), np.zeros((n_h, d)), True, 0, state)
        return MeanSolution(*warm_start, True, 0, state)
    Wn = W / W.sum()
    fbar = Wn @ feats
    ybar_w = Wn @ ybar
    Fc = feats - fbar
    Yc = np.where(W[:, None] > 0, ybar - ybar_w, 0.0)
    Sinv = np.linalg.inv(sigma)
    Sinv = 0.5 * (Sinv + Sinv.T)

    def finish(beta, conv, it, st):
        beta = _scale_to_ball(beta, feats, r)
        beta0 = ybar_w - fbar @ beta
        if warm_start is not None:
            old = mean_block_objective(*warm_start, W, ybar, feats, Sinv, C, lam)
            new = mean_block_objective(beta0, beta, W, ybar, feats, Sinv, C, lam)
            if new > old:
                return MeanSolution(np.array(warm_start[0]), np.array(warm_start[1]), conv, it, st)
        return MeanSolution(beta0, beta, conv, it, st)

    if r == 0:
        return finish(np.zeros((n_h, d)), True, 0, None)

    sw = np.sqrt(W)[:, None]
    if lam == 0:
        beta, *_ = np.linalg.lstsq(sw * Fc, sw * Yc, rcond=None)
        if math.isinf(r) or _row_norms(feats @ beta).max() <= r:
            return finish(beta, True, 0, None)

    use_ball = not math.isinf(r)
    A = Fc.T @ (W[:, None] * Fc) / C
    B = Fc.T @ (W[:, None] * Yc) @ Sinv / C
    if lam > 0:
        # the unconstrained lasso is exact and cheap; keep it if it is feasible
        H = np.kron(A, Sinv)
        H[np.diag_indices_from(H)] += 1e-14 * max(np.trace(H), 1e-300)
        start = np.zeros(n_h * d) if warm_start is None else np.asarray(warm_start[1], float).ravel()
        beta = _lasso_qp(H, -B.ravel(), np.full(n_h * d, lam), start, tol=0.1 * tol).reshape(n_h, d)
        if not use_ball or _row_norms(feats @ beta).max() <= r:
            return finish(beta, True, 0, state)
    s, Q = eigh(Sinv)
    if use_ball:
        # the deviation block is posed on F / |F|_2 with radius r / |F|_2
        FtF = feats.T @ feats
        fnorm = math.sqrt(max(np.linalg.eigvalsh(FtF)[-1], 1e-300))
        Fb = feats / fnorm
        rb = r / fnorm
        FbtFb = FtF / fnorm**2
    beta_init = np.zeros((n_h, d)) if warm_start is None else np.array(warm_start[1], dtype=float)

    if state is not None and state.z.shape == (n_h, d) and (state.w is not None) == use_ball \
            and (not use_ball or state.w.shape == (T, d)):
        z, u, rho = state.z.copy(), state.u.copy(), state.rho
        w = state.w.copy() if use_ball else None
        v = state.v.copy() if use_ball else None
    else:
        z = beta_init.copy()
        u = np.zeros_like(z)
        w = Fb @ z if use_ball else None
        v = np.zeros_like(w) if use_ball else None
        rho = max(np.trace(A) * float(s.mean()) / n_h, 1e-10)

    def factor(rho):
        base = rho * (np.eye(n_h) + FbtFb) if use_ball else rho * np.eye(n_h)
        return [cho_factor(s[j] * A + base) for j in range(d)]

    facs = factor(rho)
    n_pri = math.sqrt(n_h * d + (T * d if use_ball else 0))
    beta = beta_init
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = B + rho * (z - u)
        if use_ball:
            rhs = rhs + rho * (Fb.T @ (w - v))
        rq = rhs @ Q
        bq = np.column_stack([cho_solve(facs[j], rq[:, j]) for j in range(d)])
        beta = bq @ Q.T
        z_old = z
        bh = RELAX * beta + (1 - RELAX) * z_old
        z = _soft(bh + u, lam / rho) if lam > 0 else bh + u
        u = u + bh - z
        r2 = np.sum((beta - z) ** 2)
        dual = z - z_old
        if use_ball:
            Fbeta = Fb @ beta
            w_old = w
            wh = RELAX * Fbeta + (1 - RELAX) * w_old
            vv = wh + v
            nrm = _row_norms(vv)[:, None]
            w = vv * np.minimum(1.0, rb / np.maximum(nrm, 1e-300))
            v = v + wh - w
            r2 += np.sum((Fbeta - w) ** 2)
            dual = dual + Fb.T @ (w - w_old)
            xnorm = math.sqrt(np.sum(beta**2) + np.sum(Fbeta**2))
            znorm = math.sqrt(np.sum(z**2) + np.sum(w**2))
            ynorm = rho * float(np.linalg.norm(u + Fb.T @ v))
        else:
            xnorm = float(np.linalg.norm(beta))
            znorm = float(np.linalg.norm(z))
            ynorm = rho * float(np.linalg.norm(u))
        pri = math.sqrt(r2)
        dua = rho * float(np.linalg.norm(dual))
        if pri <= n_pri * tol + tol * max(xnorm, znorm) and dua <= n_pri * tol + tol * ynorm:
            converged = True
            break
        if pri > 10 * dua:
            rho *= 2.0
            u /= 2.0
            if use_ball:
                v /= 2.0
            facs = factor(rho)
        elif dua > 10 * pri:
            rho /= 2.0
            u *= 2.0
            if use_ball:
                v *= 2.0
            facs = factor(rho)
    st = AdmmState(z.copy(), None if w is None else w.copy(), u.copy(),
                   None if v is None else v.copy(), rho)
    out = z if lam > 0 else beta
    return finish(out, converged, it, st)


# --------------------------------------------------------------------------
# Covariance M-step


def floor_covariance(S, floor: float = SIGMA_FLOOR) -> np.ndarray:
    S = 0.5 * (S + S.T)
    lo = np.linalg.eigvalsh(S)[0]
    if lo < floor:
        S = S + (floor - lo) * np.eye(S.shape[0])
    return S


def weighted_scatter(P, gamma_k, mu_k_t) -> tuple[np.ndarray, float]:
    """Sum of c_b gamma_bk (y_b - mu)(y_b - mu)' and the total weight."""
    w = P.c * gamma_k
    R = P.Y - mu_k_t[P.tidx]
    return (R * w[:, None]).T @ R, float(w.sum())


def sigma_block_objective(sigma, scatter, wk, C) -> float:
    """(1/2C)[w_k log det Sigma + tr(Sigma^-1 scatter)]."""
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        return math.inf
    return 0.5 * (wk * logdet + np.trace(np.linalg.solve(sigma, scatter))) / C


def m_step_sigma(P, gamma, means_tkd, floor: float = SIGMA_FLOOR, old=None) -> np.ndarray:
    """Weighted residual covariance per cluster (means ``T x K x d``)."""
    K = gamma.shape[1]
    d = P.Y.shape[1]
    out = np.empty((K, d, d))
    for k in range(K):
        scatter, wk = weighted_scatter(P, gamma[:, k], means_tkd[:, k])
        if wk <= 0:
            if old is None:
                raise DataError(f"cluster {k} has zero total weight")
            out[k] = old[k]
            continue
        new = floor_covariance(scatter / wk, floor)
        if old is not None and sigma_block_objective(new, scatter, wk, P.total_weight) > \
                sigma_block_objective(old[k], scatter, wk, P.total_weight):
            new = old[k]
        out[k] = new
    return out


# --------------------------------------------------------------------------
# Initialization


def pooled_diag_cov(P) -> np.ndarray:
    w = P.c / P.c.sum()
    m = w @ P.Y
    var = w @ (P.Y - m) ** 2
    return np.diag(np.maximum(var, SIGMA_FLOOR))


def _n_distinct(Y, limit):
    return len(np.unique(Y, axis=0)[:limit])


def initialize(data, feats, K: int, seed) -> MoEParams:
    """Weighted k-means++ seeding of the intercepts; zero slopes and gating."""
    P = data if hasattr(data, "tidx") else pool(data)
    if K < 1:
        raise ValueError("K must be at least 1")
    if P.c.sum() <= 0:
        raise DataError("all weights are zero")
    d = P.Y.shape[1]
    n_h = np.asarray(feats).shape[1]
    if _n_distinct(P.Y, K) < K:
        raise DataError(f"fewer than K={K} distinct points")
    rng = np.random.default_rng(seed)
    w = P.c / P.c.sum()
    if K == 1:
        centers = (w @ P.Y)[None]
    else:
        centers = np.empty((K, d))
        centers[0] = P.Y[rng.choice(len(w), p=w)]
        d2 = ((P.Y - centers[0]) ** 2).sum(axis=1)
        for k in range(1, K):
            prob = w * d2
            prob /= prob.sum()
            centers[k] = P.Y[rng.choice(len(w), p=prob)]
            d2 = np.minimum(d2, ((P.Y - centers[k]) ** 2).sum(axis=1))
    sig = pooled_diag_cov(P)
    return MoEParams(np.zeros(K), np.zeros((n_h, K)), centers,
                     np.zeros((K, n_h, d)), np.broadcast_to(sig, (K, d, d)).copy())


# --------------------------------------------------------------------------
# EM driver


def _rescue(P, params, E, feats, stats) -> MoEParams | None:
    """Re-seed clusters with negligible weight at the worst-fit point."""
    empty = np.flatnonzero(stats.W.sum(axis=0) < EMPTY_CLUSTER_FRACTION * stats.C)
    if empty.size == 0:
        return None
    mu = params.means(feats)
    best = E.gamma.argmax(axis=1)
    resid = P.c * ((P.Y - mu[P.tidx, best]) ** 2).sum(axis=1)
    order = np.argsort(-resid, kind="stable")
    beta0, beta, sigma = params.beta0.copy(), params.beta.copy(), params.sigma.copy()
    alpha0, alpha = params.alpha0.copy(), params.alpha.copy()
    diag = pooled_diag_cov(P)
    for j, k in enumerate(empty):
        beta0[k] = P.Y[order[j]]
        beta[k] = 0.0
        sigma[k] = diag
        if k < params.K - 1:
            alpha0[k] = 0.0
            alpha[:, k] = 0.0
    return MoEParams(alpha0, alpha, beta0, beta, sigma)


def run_em(P, feats, cfg: FitConfig, init: MoEParams, restart_index: int = 0) -> FitResult:
    """Single EM run from ``init``."""
    feats = np.asarray(feats, dtype=float)
    params = init
    E = e_step(params, P, feats)
    obj = penalized_objective(E.nlpl, params, cfg)
    trace = [obj]
    devs = [max_deviation(params, feats)]
    states: list[AdmmState | None] = [None] * cfg.K
    step = None
    n_warn = n_rescue = 0
    converged = False
    for _ in range(cfg.max_iter):
        stats = sufficient_stats(P, E.gamma)
        rescued = _rescue(P, params, E, feats, stats)
        if rescued is not None:
            E2 = e_step(rescued, P, feats)
            obj2 = penalized_objective(E2.nlpl, rescued, cfg)
            if obj2 <= obj:
                n_rescue += 1
                params, E, obj = rescued, E2, obj2
                stats = sufficient_stats(P, E.gamma)
                states = [None] * cfg.K
        g = m_step_gating(stats.W, feats, cfg.lambda_alpha, stats.C,
                          warm_start=(params.alpha0, params.alpha),
                          tol=cfg.subsolver_tol, max_iter=cfg.subsolver_max_iter, step=step)
        step = g.step
        beta0 = params.beta0.copy()
        beta = params.beta.copy()
        for k in range(cfg.K):
            sol = m_step_means(stats.W[:, k], stats.ybar[:, k], feats, params.sigma[k],
                               cfg.lambda_beta, cfg.r, stats.C,
                               warm_start=(params.beta0[k], params.beta[k]), state=states[k],
                               tol=cfg.subsolver_tol, max_iter=cfg.subsolver_max_iter)
            if not sol.converged:
                n_warn += 1
            states[k] = sol.state
            beta0[k], beta[k] = sol.beta0, sol.beta
        new = params.replace(alpha0=g.alpha0, alpha=g.alpha, beta0=beta0, beta=beta)
        sigma = m_step_sigma(P, E.gamma, new.means(feats), old=params.sigma)
        params = new.replace(sigma=sigma)
        E = e_step(params, P, feats)
        new_obj = penalized_objective(E.nlpl, params, cfg)
        trace.append(new_obj)
        devs.append(max_deviation(params, feats))
        change = obj - new_obj
        obj = new_obj
        if abs(change) <= cfg.tol * max(1.0, abs(obj)):
            converged = True
            break
    if n_warn:
        log.debug("restart %d: %d subsolver calls hit the iteration cap", restart_index, n_warn)
    return FitResult(params, np.array(trace), converged, restart_index, np.array(devs),
                     subsolver_warnings=n_warn, rescues=n_rescue)


def restart_seeds(seed, restarts: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(restarts)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _one_restart(args):
    P, feats, cfg, seed, i = args
    return run_em(P, feats, cfg, initialize(P, feats, cfg.K, seed), restart_index=i)


def fit(data, feats, cfg: FitConfig, threads: int = 1) -> FitResult:
    """Best of ``cfg.restarts`` seeded EM runs (lowest final objective).

    Ties go to the lowest restart index, so the outcome does not depend on
    ``threads``.
    """
    P = data if hasattr(data, "tidx") else pool(data)
    feats = np.asarray(feats, dtype=float)
    if feats.shape[0] != P.T:
        raise ValueError("feature rows must align with cytograms")
    if P.c.sum() <= 0:
        raise DataError("all weights are zero")
    if _n_distinct(P.Y, cfg.K) < cfg.K:
        raise DataError(f"K={cfg.K} exceeds the number of distinct data points")
    jobs = [(P, feats, cfg, s, i) for i, s in enumerate(restart_seeds(cfg.seed, cfg.restarts))]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one_restart, jobs))
    else:
        results = [_one_restart(j) for j in jobs]
    finals = np.array([r.objective for r in results])
    best = int(np.argmin(finals))
    out = results[best]
    out.restart_objectives = finals
    if out.subsolver_warnings:
        warnings.warn(f"{out.subsolver_warnings} inner solves stopped at the iteration cap",
                      SubsolverWarning, stacklevel=2)
    return out


def time_constant_fit(data, feats, cfg: FitConfig, threads: int = 1) -> FitResult:
    """Fit with all slopes pinned at zero (a time-constant weighted mixture)."""
    return fit(data, feats, cfg.replace(r=0.0, lambda_alpha=1e12, lambda_beta=0.0), threads)


def lambda_max(data, feats, cfg: FitConfig, threads: int = 1) -> tuple[float, float]:
    """Smallest penalties that keep every slope at zero, from a zero-slope fit."""
    P = data if hasattr(data, "tidx") else pool(data)
    feats = np.asarray(feats, dtype=float)
    base = time_constant_fit(P, feats, cfg, threads).params
    E = e_step(base, P, feats)
    st = sufficient_stats(P, E.gamma)
    la = 0.0
    if cfg.K > 1:
        _, _, gA = gating_gradient(base.alpha0[:-1] - base.alpha0[-1],
                                   np.zeros((feats.shape[1], cfg.K - 1)), st.W, feats, st.C)
        la = float(np.abs(gA).max())
    lb = 0.0
    for k in range(cfg.K):
        Wk = st.W[:, k]
        if Wk.sum() <= 0:
            continue
        Wn = Wk / Wk.sum()
        Fc = feats - Wn @ feats
        Yc = np.where(Wk[:, None] > 0, st.ybar[:, k] - Wn @ st.ybar[:, k], 0.0)
        g = mean_smooth_gradient(np.zeros((feats.shape[1], P.Y.shape[1])), Wk, Yc, Fc,
                                 np.linalg.inv(base.sigma[k]), st.C)
        lb = max(lb, float(np.abs(g).max()))
    return la, lb
