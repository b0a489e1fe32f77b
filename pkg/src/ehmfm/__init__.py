"""Hidden Markov factor models for multivariate longitudinal panels.

Fits discrete-time and continuous-time variants by a stabilized EM
algorithm with mixture-based initialization, ships a synthetic-data
generator with known ground truths, and provides recovery metrics and
information-criterion model selection.
"""

from .errors import EhmfmError, NumericalError, ValidationError
from .evaluation import (
    PromaxResult,
    RecoveryReport,
    SelectionReport,
    aad,
    align_states,
    misclassification,
    promax_standardize,
    recovery_report,
    select_model,
    transition_bias,
    varimax,
)
from .inference import PosteriorSet, SuffStats, estep
from .initialization import InitConfig, fa_fit, gmm_fit, initialize_params
from .matexp import ExpmMethod, CtTransitionCache, expm, expm_frechet
from .model import (
    MODE_CT,
    MODE_DT,
    EmissionWorkspace,
    ModelDims,
    ModelParams,
    PanelDataset,
    SubjectRecord,
    ct_intensity_matrix,
    dt_transition_matrix,
    emission_log_density,
    factor_posterior_moments,
)
from .semis import FitConfig, FitResult, decode, fit, free_parameter_count
from .simgen import GroundTruth, SimScenario, generate, scenario_grid, true_params

__version__ = "0.1.0"

__all__ = [
    "EhmfmError", "NumericalError", "ValidationError",
    "PanelDataset", "SubjectRecord", "ModelDims", "ModelParams",
    "EmissionWorkspace", "emission_log_density", "factor_posterior_moments",
    "dt_transition_matrix", "ct_intensity_matrix", "MODE_DT", "MODE_CT",
    "ExpmMethod", "CtTransitionCache", "expm", "expm_frechet",
    "PosteriorSet", "SuffStats", "estep",
    "InitConfig", "gmm_fit", "fa_fit", "initialize_params",
    "FitConfig", "FitResult", "fit", "decode", "free_parameter_count",
    "SimScenario", "GroundTruth", "generate", "scenario_grid", "true_params",
    "aad", "align_states", "misclassification", "transition_bias",
    "recovery_report", "RecoveryReport", "select_model", "SelectionReport",
    "promax_standardize", "PromaxResult", "varimax",
]
