"""Logistic meta-analysis combining individual-level and aggregate trial data."""

from .errors import (
    AdweightError,
    BoundaryError,
    ConvergenceError,
    DimensionError,
    DomainError,
    MomentError,
    MomentWarning,
    OverlapError,
    OverlapWarning,
    PseudoDataSizeError,
    SchemaError,
    SeparationError,
    SingularDesignError,
    UnknownStudyError,
)
from .ipd import IpdFit, IpdTrial, fit_ipd, fit_stacked, fit_trial_mle
from .model import (
    ObservationRow,
    OutcomeModelSpec,
    RandomEffectSummary,
    SharedParams,
    TrialParams,
    expit,
    mean_response,
    score_contributions,
)
from .pipeline import FitReport, PipelineOptions, run_pipeline
from .recover import PairEstimate, pool_pairs, pool_random_effects, pooling_weights, solve_pair
from .weights import AdArm, AdSummary, MomentSpec, WeightFit, fit_weight_model, weight_diagnostics

__version__ = "0.1.0"
