"""Incremental hybrid ensemble regression for ankle-torque prediction.

A shared base forest learns the mapping from hip/knee/shank kinematics to
mass-normalized ankle torque across a pool of subjects; per-subject blocks
of deeper trees are appended after any gait cycle whose trial-level
R-squared falls below a threshold.  The package covers the data pipeline
(ingestion, signal prep), the from-scratch forest, the selective-update
model, the evaluation/benchmark protocol, and a synthetic oracle for tests.
"""

from .data import (
    CYCLE_SAMPLES,
    FEATURE_COLUMNS,
    Dataset,
    ProcessedTrial,
    SubjectMeta,
    TrialRecord,
    Violation,
    load_manifest,
    save_dataset,
    validate_dataset,
)
from .evaluation import (
    GridSearchResult,
    ProtocolReport,
    TimingReport,
    grid_search_cv,
    r_squared,
    rmse,
    rotations,
    run_protocol,
    subject_kfold,
    timing_bench,
    wilcoxon_signed_rank,
)
from .forest import (
    EnsembleBlock,
    ForestConfig,
    RegressionTree,
    feature_importances,
    fit_block,
    fit_tree,
    predict_block,
    select_features,
)
from .hybrid import (
    HybridModel,
    UpdateRecord,
    fit_base,
    load_model,
    maybe_update,
    normative_target,
    predict,
    recursive_predict,
    save_model,
)
from .signal import (
    FilterSpec,
    build_feature_matrix,
    butterworth_lowpass,
    first_difference,
    mass_normalize,
    process_dataset,
    resample_cycle,
)
from .synth import OracleParams, gen_dataset, gen_subject, gen_trial, torque_per_mass

__version__ = "0.1.0"
