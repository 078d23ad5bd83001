"""Common mechanism regression: multitask recovery of a shared low-rank map.

Public surface: linear-algebra primitives, the generative model and its
closed-form oracles, the spectral/gradient estimators and baselines, the
experiment harnesses, and the image-classification pipeline.
"""

from .errors import (
    BadMagic,
    CmrError,
    Degenerate,
    DimensionMismatch,
    Diverged,
    EmptyDataset,
    InsufficientSamples,
    NonFinite,
    NotDivisible,
    NotInvertible,
    NotPsd,
    OutOfDomain,
    RankDeficient,
    RankRequest,
    ShapeMismatch,
    TruncatedFile,
)
from .estimator import (
    FitResult,
    RefineConfig,
    SpectralEstimate,
    cmr1,
    estimate_a,
    estimate_gamma,
    fit_local,
    frr_baseline,
    loss_and_grads,
    refine_gd,
    ridge_solve,
    spectral_cmr,
    spectral_cmr_nw,
    spectral_from_moments,
)
from .experiments import (
    AConcentrationConfig,
    BoundCheckConfig,
    BSweepConfig,
    ConcentrationReport,
    GammaConcentrationConfig,
    GradCheckConfig,
    PhaseDiagramResult,
    PhaseGridConfig,
    TrialRecord,
    mix_seed,
    run_a_concentration,
    run_b_sweep,
    run_bound_check,
    run_gamma_concentration,
    run_gradient_check,
    run_phase_diagram,
)
from .linalg import (
    EigPair,
    eig_sym,
    inv_sqrt_psd,
    operator_norm,
    sqrt_psd,
    subspace_distance,
)
from .model import (
    CmrModel,
    DivergenceCoefficients,
    ExpectedA,
    TaskCovariances,
    TaskDataset,
    davis_kahan_bound,
    divergence_coefficients,
    expected_a,
    generate_synthetic,
    load_model,
    random_covariances,
    random_psd,
    responses,
    sample_dataset,
    sample_matrix_normal,
    save_model,
)
from .vision import (
    BandedImage,
    PairTask,
    UpliftMap,
    all_digit_pairs,
    block_reshape,
    inverse_block_reshape,
    make_pair_tasks,
    read_idx,
    run_pair_classification,
    synthetic_digits,
    uplift,
)

__version__ = "0.1.0"
