"""Partial response curves of fitted cluster means and probabilities.

A curve sweeps one principal component over a grid while the remaining
components sit at their training-time averages (or at fixed conditioning
values).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .features import FeaturePipeline
from .model import MoEParams


@dataclass(frozen=True)
class Target:
    """``kind`` is 'mean' or 'probability'; ``k`` and ``dim`` are 0-based."""

    kind: str
    k: int
    dim: int = 0

    def __post_init__(self):
        if self.kind not in ("mean", "probability"):
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Target":
        """Parse ``mean:k=1,dim=0`` or ``probability:k=2`` (cluster ``k`` is 1-based)."""
        m = re.fullmatch(r"\s*(mean|prob|probability)\s*(?::(.*))?", text)
        if not m:
            raise ValueError(f"cannot parse target {text!r}")
        kind = "probability" if m.group(1).startswith("prob") else "mean"
        opts = {}
        for part in filter(None, (m.group(2) or "").split(",")):
            key, _, val = part.partition("=")
            opts[key.strip()] = int(val)
        if "k" not in opts:
            raise ValueError("target needs a cluster index k")
        return cls(kind, opts["k"] - 1, opts.get("dim", 0))


@dataclass(frozen=True)
class PrcRequest:
    target: Target
    sweep_pc: int  # 0-based
    grid: np.ndarray
    baseline: np.ndarray  # q, time-averaged training scores
    conditioning: dict = field(default_factory=dict)  # 0-based pc -> value
    observed_range: tuple | None = None
    extrapolate: bool = False

    def __post_init__(self):
        q = len(self.baseline)
        if not 0 <= self.sweep_pc < q:
            raise IndexError(f"sweep component {self.sweep_pc} out of range for q={q}")
        for j in self.conditioning:
            if not 0 <= j < q:
                raise IndexError(f"conditioning component {j} out of range for q={q}")
        if self.observed_range is not None and not self.extrapolate:
            lo, hi = self.observed_range
            g = np.asarray(self.grid)
            if g.size and (g.min() < lo - 1e-12 * abs(lo) or g.max() > hi + 1e-12 * abs(hi)):
                raise ValueError("sweep grid leaves the observed range; pass extrapolate=True")


def sweep_grid(psi_train, j: int, n: int = 201) -> np.ndarray:
    col = np.asarray(psi_train, dtype=float)[:, j]
    return np.linspace(col.min(), col.max(), n)


def _evaluate(params: MoEParams, feats, target: Target) -> np.ndarray:
    if not 0 <= target.k < params.K:
        raise IndexError(f"cluster {target.k} out of range for K={params.K}")
    if target.kind == "mean":
        if not 0 <= target.dim < params.d:
            raise IndexError(f"dimension {target.dim} out of range for d={params.d}")
        return params.beta0[target.k, target.dim] + feats @ params.beta[target.k, :, target.dim]
    return softmax(params.alpha0 + feats @ params.alpha, axis=1)[:, target.k]


def scores_matrix(req: PrcRequest) -> np.ndarray:
    grid = np.asarray(req.grid, dtype=float)
    S = np.tile(np.asarray(req.baseline, dtype=float), (len(grid), 1))
    for j, v in req.conditioning.items():
        S[:, j] = v
    S[:, req.sweep_pc] = grid
    return S


def partial_response(params: MoEParams, pipeline: FeaturePipeline, req: PrcRequest) -> np.ndarray:
    """``n x 2`` table of (sweep value, target value)."""
    if pipeline.n_h != params.n_h or pipeline.q != len(req.baseline):
        raise ValueError("model and pipeline disagree in feature dimensions")
    feats = pipeline.from_scores(scores_matrix(req))
    return np.column_stack([np.asarray(req.grid, dtype=float), _evaluate(params, feats, req.target)])


def conditional_partial_response(params: MoEParams, pipeline: FeaturePipeline, target: Target,
                                 baseline, grid, sweep_pc: int = 1, condition_pc: int = 0,
                                 values=(-6.0, -1.0, 4.0), observed_range=None,
                                 extrapolate: bool = False) -> dict:
    """One partial response curve per fixed value of ``condition_pc`` (default PC1)."""
    out = {}
    for c in values:
        req = PrcRequest(target, sweep_pc, np.asarray(grid, dtype=float), np.asarray(baseline, dtype=float),
                         {condition_pc: float(c)}, observed_range, extrapolate)
        out[float(c)] = partial_response(params, pipeline, req)
    return out
