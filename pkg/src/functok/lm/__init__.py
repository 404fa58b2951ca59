from .model import PRESETS, FfnParams, TransformerConfig, TransformerModel, ffn_apply, init_model
from .train import (
    TRAIN_PRESETS,
    GroupStats,
    LossGroupTrace,
    TokenStream,
    TrainConfig,
    TransitionGroup,
    classify_transition,
    lr_at,
    train,
    train_step,
)
from .checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint
