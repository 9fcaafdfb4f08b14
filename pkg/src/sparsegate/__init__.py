"""Training-free low-rank sparsity predictors for gated feed-forward blocks."""

from .analysis import (
    BoundReport,
    MetricRow,
    layer_metrics,
    roc_auc,
    shifted_residual_bound,
    svd_bound_check,
    worst_case_bound,
)
from .calibration import (
    CalibInstance,
    CalibResult,
    build_instance,
    calibrate,
    damage_weights,
    dp_knapsack_oracle,
    greedy_calibrate,
    kendall_tau_diagnostic,
    proxy_scores,
)
from .containers import Activation, ActivationBatch, DataError, FfnWeights, Predictor, SparseGateError
from .factorization import (
    SpectralInfo,
    WhiteningResult,
    auto_rank,
    build_predictor,
    cholesky_whitening,
    residual_spectral_norm,
)
from .ffn_exec import (
    ExecStats,
    Mask,
    Pipeline,
    dense_ffn,
    gating_error,
    op_count_model,
    predict_mask,
    sparse_ffn_parallel,
    sparse_ffn_sequential,
)

__version__ = "0.1.0"
