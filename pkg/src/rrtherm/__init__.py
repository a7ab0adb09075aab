"""Bayesian release-recapture thermometry for optically trapped atoms.

The package estimates the temperature of one or a few atoms in an optical
tweezer from recapture counts after short trap-off intervals.  A grid
posterior over temperature is updated shot by shot; release times can be
chosen adaptively to maximise the expected information gain.  Conventional
least-squares fitting, seeded simulation studies, and an HTTP session
service for live experiments are included.
"""

from .constants import DEFAULT_WAVELENGTH, K_B, MASS_K41
from .inference import (
    DegeneratePosteriorError,
    InfoGainCurve,
    PosteriorGrid,
    PriorSpec,
    bayes_update,
    default_prior,
    error_bar,
    estimate,
    info_gain,
    info_gain_curve,
    make_prior,
    mean_log_error,
    optimal_time,
)
from .ingest import (
    DEFAULT_ATOM_CAP,
    CalibrationError,
    CalibrationFit,
    RecordFormatError,
    estimate_mean_loading,
    fit_calibration_histogram,
    load_record,
    photons_to_atoms,
    record_from_payload,
    record_to_payload,
    save_record,
)
from .physics import (
    LikelihoodModel,
    TrapConfig,
    lambert_w0,
    recapture_curve,
    recapture_fraction,
)
from .protocols import (
    AdaptiveSession,
    FitResult,
    MeasurementRecord,
    OutcomeSourceError,
    ReplayResult,
    TracePoint,
    adaptive_protocol,
    adaptive_step,
    apriori_protocol,
    default_prior_bounds,
    least_squares_fit,
    replay_record,
    replay_reordered,
    two_parameter_posterior,
    undo_last_shot,
)
from .simulate import (
    BenchmarkConfig,
    ConvergenceCurve,
    ConvergenceReport,
    StudyResult,
    TrajectoryConfig,
    ValidityCell,
    bootstrap_ordering_confidence,
    convergence_study,
    default_convergence_grid,
    fitting_model,
    mc_recapture_fraction,
    sample_outcome,
    sample_outcomes,
    stream_rng,
    validity_scan,
    variability_study,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSession",
    "BenchmarkConfig",
    "CalibrationError",
    "CalibrationFit",
    "ConvergenceCurve",
    "ConvergenceReport",
    "DEFAULT_ATOM_CAP",
    "DEFAULT_WAVELENGTH",
    "DegeneratePosteriorError",
    "FitResult",
    "InfoGainCurve",
    "K_B",
    "LikelihoodModel",
    "MASS_K41",
    "MeasurementRecord",
    "OutcomeSourceError",
    "PosteriorGrid",
    "PriorSpec",
    "ReplayResult",
    "StudyResult",
    "TracePoint",
    "TrajectoryConfig",
    "TrapConfig",
    "ValidityCell",
    "adaptive_protocol",
    "adaptive_step",
    "apriori_protocol",
    "bayes_update",
    "bootstrap_ordering_confidence",
    "convergence_study",
    "default_convergence_grid",
    "default_prior",
    "default_prior_bounds",
    "error_bar",
    "estimate",
    "estimate_mean_loading",
    "fit_calibration_histogram",
    "fitting_model",
    "info_gain",
    "info_gain_curve",
    "lambert_w0",
    "least_squares_fit",
    "load_record",
    "make_prior",
    "mc_recapture_fraction",
    "mean_log_error",
    "optimal_time",
    "photons_to_atoms",
    "record_from_payload",
    "record_to_payload",
    "recapture_curve",
    "recapture_fraction",
    "replay_record",
    "replay_reordered",
    "sample_outcome",
    "sample_outcomes",
    "save_record",
    "stream_rng",
    "two_parameter_posterior",
    "undo_last_shot",
    "validity_scan",
    "variability_study",
]
