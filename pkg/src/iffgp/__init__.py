"""Sparse Gaussian-process regression with integrated Fourier features."""

from .data_io import Dataset, Normalization, load_csv, metrics, normalize_split, sample_gp_prior, synthetic_dataset
from .errors import (
    CacheFormatError,
    ConfigError,
    DegenerateInputError,
    DegenerateSpectrumError,
    DegenerateTailError,
    FormatError,
    IFFError,
    InvalidArgumentError,
    NegativeTraceWarning,
    NumericalFailure,
    SchemaError,
    StaleCacheError,
    TruncationWarning,
    UnsupportedFamilyError,
)
from .features import FrequencyGrid, build_grid, default_epsilon, feature_matrix, grid_for_bandwidth, kuu_diag
from .gp_core import (
    PredictiveMarginals,
    VariationalState,
    collapsed_objective,
    exact_log_marginal,
    exact_predict,
    iff_objective,
    iff_predict,
    optimal_qu,
    sgpr_inducing_objective,
)
from .kernels import Kernel, density_for, spectral_density_dft
from .precompute import DataSummary, cached_summaries, compute_summaries, load_summary, save_summary
from .train import FitReport, HyperParams, ModelConfig, OptConfig, fit, gradient_check

__version__ = "0.1.0"
