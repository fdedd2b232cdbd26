"""Full-information linked ICA (FI-LICA) for multimodal data with missing subjects."""

from .engine import Decomposition, EngineError, decompose, reconstruct
from .evaluation import aggregate, best_match, covariate_bias, evaluate_fit, h_metrics
from .fusion import (
    METHODS,
    FiLicaConfig,
    FusionResult,
    crude_h,
    fit_complete_case,
    fit_filica,
    fit_method,
    fit_oracle,
    fit_replace0,
    impute_missing,
    rescale_h,
    standardize,
)
from .matrixio import DatasetError, MaskedModality, load_dataset, save_dataset, save_results
from .simgen import gen_replicate, gen_spatial_maps, logistic_missing_prob

__all__ = [
    "METHODS", "DatasetError", "Decomposition", "EngineError", "FiLicaConfig", "FusionResult",
    "MaskedModality", "aggregate", "best_match", "covariate_bias", "crude_h", "decompose",
    "evaluate_fit", "fit_complete_case", "fit_filica", "fit_method", "fit_oracle", "fit_replace0",
    "gen_replicate", "gen_spatial_maps", "h_metrics", "impute_missing", "load_dataset",
    "logistic_missing_prob", "reconstruct", "rescale_h", "save_dataset", "save_results",
    "standardize",
]
