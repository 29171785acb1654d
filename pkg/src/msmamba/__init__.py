"""Multi-scale selective state-space forecaster on a small numpy autodiff engine."""

from .autodiff import GradientMap, Tensor, backward, grad_check, grad_check_report, no_grad, tape, tensor
from .data import (
    SynthSpec,
    TimeSeriesDataset,
    WindowBatch,
    chronological_split,
    load_csv,
    restore,
    save_csv,
    standardize,
    synth_multiscale,
    window,
)
from .errors import ConfigError, DataError, DimensionError, DomainError, GraphError, MsMambaError, NumericError
from .model import (
    CostReport,
    ForecastModel,
    ModelConfig,
    cost_report,
    load_checkpoint,
    model_forward,
    mse_loss,
    save_checkpoint,
)
from .multiscale import MultiScaleLayer, ScaleStrategy, bidirectional_forward, multiscale_forward, resolve_scales
from .ssm import (
    MambaBlock,
    SsmCore,
    discretize_zoh,
    mamba_block_forward,
    naive_scan_oracle,
    scan,
    selective_scan,
    spectral_decay_report,
)
from .training import AdamState, RunHistory, TrainConfig, adam_step, evaluate, log_scale_trajectory, predict, train

__version__ = "0.1.0"
