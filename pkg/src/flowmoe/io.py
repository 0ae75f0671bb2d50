"""JSON persistence for fitted models and atomic file output."""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .em import FitConfig
from .features import FeaturePipeline
from .model import MoEParams

FORMAT_VERSION = 1


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling of ``path``; rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path, doc) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    with atomic_path(path) as tmp, tmp.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class FittedModel:
    """Everything needed to predict at new covariates."""

    params: MoEParams
    pipeline: FeaturePipeline
    config: FitConfig
    bin_grid: dict | None = None  # {"lo": [...], "hi": [...], "D": int}
    psi_mean: np.ndarray | None = None
    psi_min: np.ndarray | None = None
    psi_max: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.params.K

    @property
    def d(self) -> int:
        return self.params.d

    def to_dict(self) -> dict:
        doc = {
            "format_version": FORMAT_VERSION,
            "K": self.K,
            "d": self.d,
            "n_h": self.params.n_h,
            "normalization": "total_weight",
            "params": self.params.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "fit_config": self.config.to_dict(),
            "bin_grid": self.bin_grid,
        }
        for name in ("psi_mean", "psi_min", "psi_max"):
            val = getattr(self, name)
            doc[name] = None if val is None else np.asarray(val).tolist()
        return doc

    @classmethod
    def from_dict(cls, doc) -> "FittedModel":
        def arr(name):
            return None if doc.get(name) is None else np.array(doc[name], dtype=float)
        return cls(MoEParams.from_dict(doc["params"]), FeaturePipeline.from_dict(doc["pipeline"]),
                   FitConfig.from_dict(doc["fit_config"]), doc.get("bin_grid"),
                   arr("psi_mean"), arr("psi_min"), arr("psi_max"))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "FittedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
