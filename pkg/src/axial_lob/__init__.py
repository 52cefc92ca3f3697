"""Gated axial attention for mid-price direction prediction from LOB windows."""

from .attention import (
    AxialAttentionConfig,
    GatedAxialLayer,
    axial_pair,
    full_attention_2d,
    gated_axial_attention,
    multi_head_combine,
)
from .evaluation import MetricsReport, compute_metrics, evaluate_checkpoint, evaluate_model
from .lob import (
    DatasetSplit,
    LabeledWindow,
    LobEventSeries,
    LobSnapshot,
    SynthConfig,
    WindowSet,
    build_windows,
    direction_label,
    mid_price,
    normalize_windows,
    permute_features,
    prepare_datasets,
    smoothed_future_mid,
    split_series,
    synth_generate,
)
from .model import (
    AxialLobModel,
    ModelConfig,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .permtest import permutation_robustness
from .tensor import Parameter, Tensor, backward, cross_entropy, no_grad
from .training import TrainConfig, TrainState, cosine_lr_multiplier, sgd_momentum_step, train

__version__ = "0.1.0"
