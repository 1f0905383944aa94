"""Twin-view self-supervised classification with a numpy reference implementation."""

from .config import Settings, format_config, parse_config
from .data import AugmentConfig, Dataset, augment_batch, augment_views, gen_gaussian_mixture, load_csv, load_idx, save_csv
from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    GenerationError,
    GradientCheckError,
    IncompatibleVersionError,
    InvalidInputError,
    TrainingDivergedError,
    TwistError,
)
from .evaluation import (
    MetricsReport,
    build_contingency,
    clustering_metrics,
    collapse_report,
    hungarian_match,
    linear_probe,
    unsup_accuracy,
)
from .losses import (
    LossBreakdown,
    TwistCoefficients,
    dino_baseline_loss,
    mutual_information_estimate,
    twist_loss_asymmetric,
    twist_loss_grad,
    twist_loss_symmetric,
)
from .model import ModelConfig, TwistNet, grad_check, init_model, init_model_from_config
from .optim import EmaState, LarsConfig, ScheduleConfig, SgdMomentumState, cosine_value, ema_update, lars_step, sgd_momentum_step
from .pipeline import (
    SelfLabelConfig,
    TrainConfig,
    fit,
    load_checkpoint,
    make_checkpoint,
    new_train_state,
    predict,
    save_checkpoint,
    self_label_stage,
    state_from_checkpoint,
    train_epoch,
)

__version__ = "0.1.0"
