"""Zero-inflated beta mixture mediation analysis for compositional microbiome mediators."""

from zibmed.model import (
    Dataset,
    EffectContrast,
    MixtureConfig,
    ParameterVector,
    SubjectRecord,
    beta_log_pdf,
    expit,
    lod_observed,
    zibm_density,
)
from zibmed.em import EmOptions, FitResult, em_fit, information_matrix
from zibmed.effects import EffectEstimates, compute_effects, delta_method_ci, bootstrap_ci

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EffectContrast",
    "EffectEstimates",
    "EmOptions",
    "FitResult",
    "MixtureConfig",
    "ParameterVector",
    "SubjectRecord",
    "beta_log_pdf",
    "bootstrap_ci",
    "compute_effects",
    "delta_method_ci",
    "em_fit",
    "expit",
    "information_matrix",
    "lod_observed",
    "zibm_density",
]
