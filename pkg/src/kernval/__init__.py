"""Retraining-free Shapley data valuation via kernel regression.

Training a model on a subset is replaced by kernel regression over slices of
one precomputed kernel matrix, which makes exact leave-one-out and
Monte-Carlo Shapley scoring cheap enough to run on a desk.
"""

from .applications import (
    Curve,
    DetectionCurve,
    correlate,
    flip_labels,
    mislabel_detection,
    removal_curve,
    selection_curve,
)
from .datasets import (
    DistributionSpec,
    Example,
    LabeledDataset,
    OneHotLabels,
    benchmark_distribution,
    default_distribution,
    load_dataset,
    make_benchmark,
    sample_complement,
    sample_dataset,
    synth_kernel,
    write_labels_csv,
)
from .errors import (
    BadMagicError,
    DataError,
    KernelFormatError,
    KernvalError,
    NonFiniteEntryError,
    SingularKernelError,
    TrailingBytesError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .kernelstore import IndexSlice, KernelStore, Layout, read_kernel, slice_kernel, write_kernel
from .regression import (
    EmptyModelPolicy,
    JitterPolicy,
    PredictionMatrix,
    RegressionState,
    extend,
    fit_predict,
    make_state,
    spd_solve,
    state_predict,
    subset_utility,
    utility,
)
from .robustness import (
    BoundsReport,
    RemarkReport,
    SignProtocolResult,
    corollary_hypotheses_hold,
    remark_diagnostics,
    robustness_protocol,
    sample_pool,
    sign,
    theorem_bounds,
)
from .shapley import (
    MarginalProfile,
    PermutationRun,
    ScoreTable,
    ValuationContext,
    estimate_marginal_profile,
    exact_shapley,
    fisher_yates,
    freeshap,
    loo,
    marginal_contribution,
    permutation_for,
    shapley_from_subset_utilities,
    tmc_freeshap,
)

__version__ = "0.1.0"
