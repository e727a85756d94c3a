"""Discrete-time neural survival analysis for early detection.

A GRU maps variable-length sequences of time-varying covariates to
per-timestep hazards; the derived survival curve is monotone, so
threshold predictions are consistent across time.  Training minimizes a
censored survival likelihood, either the regular one or an
early-detection variant that rewards shifting hazard mass before the
(late) label time.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    Batch,
    DatasetSplit,
    GeneratorConfig,
    Standardizer,
    UserRecord,
    generate_synthetic,
    make_batches,
    parse_records,
    split_dataset,
    write_records,
)
from .heads import DistParams, hazard_increment, head_params, increments
from .model import (
    CONFIG_KINDS,
    backward,
    forward_hazards,
    record_loss,
    resolve_kinds,
    survival_curve,
)
from .nn import (
    AdamState,
    ModelParams,
    adam_update,
    finite_diff_gradient,
    gru_step,
    init_params,
    new_adam_state,
    softplus,
)
from .survival import (
    SAFE,
    SAFE_R,
    CensorLabel,
    analytic_hazard_grad,
    batch_loss,
    cdf_from_hazards,
    get_clamp_count,
    hazards_to_survival,
    reset_clamp_count,
    safe_loss,
    safe_r_loss,
    stable_log_expm1,
)
from .training import (
    EarlyDetectionReport,
    MetricsAtK,
    TrainConfig,
    TrainResult,
    compare_models,
    early_detection_report,
    metrics_at_k,
    metrics_table,
    predict_flag_time,
    run_experiment,
    select_threshold,
    train,
)

__version__ = "0.1.0"
