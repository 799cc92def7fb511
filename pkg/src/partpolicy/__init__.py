"""Cross-embodiment whole-body policy: canonical part-slot state encoding,
a mixture-of-experts future-state predictor, a history query feature cache,
and a flow-matching action expert with residual-gated fusion."""

from .action import ActionChunk, ActionDenoiser, interpolate_actions, sample_actions
from .codec import PartCodec, PartLatentGrid, configure_identity
from .context import ContextEncoder, ContextFeatures, HistoryCache, Observation
from .moe import MoEConfig, MoELayer, RoutingRecord, load_balance_loss
from .policy import ModelConfig, SamplerConfig, WholeBodyPolicy, rollout_episode
from .predictor import StatePredictor
from .slots import CanonicalSlot, EmbodimentSpec, NormalizationStats, ProprioState
from .data import DataError, WindowDataset, build_dataset
from .training import (
    NumericalError,
    TrainConfig,
    Trainer,
    compute_losses,
    load_checkpoint,
    make_flow_target,
    save_checkpoint,
    staged_schedule,
)

__all__ = [
    "ActionChunk",
    "ActionDenoiser",
    "CanonicalSlot",
    "ContextEncoder",
    "ContextFeatures",
    "DataError",
    "EmbodimentSpec",
    "HistoryCache",
    "MoEConfig",
    "MoELayer",
    "ModelConfig",
    "NormalizationStats",
    "NumericalError",
    "Observation",
    "PartCodec",
    "PartLatentGrid",
    "ProprioState",
    "RoutingRecord",
    "SamplerConfig",
    "StatePredictor",
    "TrainConfig",
    "Trainer",
    "WholeBodyPolicy",
    "WindowDataset",
    "build_dataset",
    "compute_losses",
    "configure_identity",
    "interpolate_actions",
    "load_balance_loss",
    "load_checkpoint",
    "make_flow_target",
    "rollout_episode",
    "sample_actions",
    "save_checkpoint",
    "staged_schedule",
]

__version__ = "0.1.0"
