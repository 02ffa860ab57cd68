"""Distance-based near-OOD detection on classifier feature embeddings.

The package fits class-conditional Gaussians with one shared covariance on
penultimate-layer activations and scores test samples by Mahalanobis
distance (MD) or the relative / likelihood-ratio variant (RMD). Training
the feature extractor with label smoothing yields the MD-LS / RMD-LS
method rows. A synthetic near-OOD benchmark, the metric suite, figure
data exporters, and a CLI round out the pipeline.
"""

from .bench import BenchConfig, LabeledDataset, generate, kfold_split
from .errors import (
    ConfigError,
    ConfigInvalid,
    ContainsOodRows,
    DataError,
    DegeneratePlane,
    DimensionMismatch,
    EmptyClass,
    EmptyGroup,
    EmptyInput,
    EpsilonOutOfRange,
    LabelOutOfRange,
    LengthMismatch,
    NearOodError,
    NonFiniteLoss,
    NotPositiveDefinite,
    NotSymmetric,
    NumericalError,
    TooFewSamples,
    UnknownClass,
)
from .experiment import (
    ExperimentResult,
    PipelineConfig,
    run_experiment,
)
from .gaussian import (
    OOD_LABEL,
    FeatureSet,
    GaussianOodModel,
    ScoreVector,
    fit_gaussians,
    mahalanobis,
    score_md,
    score_rmd,
)
from .metrics import (
    EvalReport,
    aupr,
    auroc,
    evaluate_scores,
    id_accuracy,
    precision_f1_at,
    threshold_at_tpr,
)
from .numerics import (
    CholeskyFactor,
    RngState,
    cholesky,
    mix_seed,
    orthonormal_plane_basis,
    solve_spd,
)
from .trainer import (
    ClassifierParams,
    TrainConfig,
    extract_features,
    forward,
    loss_and_gradient,
    smooth_targets,
    train,
)
from .viz import (
    DensitySeries,
    ProjectionResult,
    project_to_weight_plane,
    projection_separation_ratio,
    score_density,
)

__version__ = "0.1.0"
