"""Matrix-free truncated-SVD Levenberg-Marquardt inversion toolkit."""

from .dense import (
    NotPositiveDefiniteError,
    SingularTriangularError,
    cholesky_lower,
    qr_thin,
    solve_triangular,
    svd_full,
)
from .inversion import (
    ESTIMATORS,
    InverseProblem,
    LmResult,
    build_regularizer,
    gamma_on_failure,
    gamma_on_success,
    lm_update,
    mismatch_bounds,
    objective,
    run_tsvd_lm,
)
from .model import (
    GridConfig,
    SensitivityOp,
    SimulationError,
    TimeSteppingModel,
    Trajectory,
    generate_observations,
    smooth_random_field,
)
from .operators import (
    CountingOp,
    DimensionlessSensitivityOp,
    LinearOp,
    MatrixOp,
    OpCounter,
    TransposeOp,
    Whitener,
    duality_gap,
)
from .oracle import DenseReference, assemble_dense_sensitivity, solve_full_lm, whiten_sensitivity
from .sketch import (
    IllConditionedSketchError,
    LanczosResult,
    SketchConfig,
    SubspaceResult,
    TruncatedSvd,
    TruncationSchedule,
    build_reuse_samples,
    gaussian_sample,
    orient_for_sketch,
    schedule_rank,
    subspace_iteration,
    tsvd_1view,
    tsvd_2view,
    tsvd_2view_voronin,
    tsvd_lanczos,
)

__version__ = "0.1.0"
