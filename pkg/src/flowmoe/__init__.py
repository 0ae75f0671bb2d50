"""Covariate-driven Gaussian mixture of experts for weighted cytogram time series."""

__version__ = "0.1.0"

from .data import BinnedCytogram, Cytogram, CovariateMatrix, DataError, bin_cytogram, ingest_dataset
from .em import FitConfig, FitResult, fit
from .features import FeaturePipeline, build_pipeline, fit_pca, make_random_features
from .model import MoEParams, log_pseudolikelihood, nlpl, predict

__all__ = [
    "BinnedCytogram", "Cytogram", "CovariateMatrix", "DataError", "bin_cytogram", "ingest_dataset",
    "FitConfig", "FitResult", "fit", "FeaturePipeline", "build_pipeline", "fit_pca",
    "make_random_features", "MoEParams", "log_pseudolikelihood", "nlpl", "predict",
]
