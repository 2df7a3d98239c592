"""Encoder-decoder transformer, training loop and checkpoint I/O."""

from .checkpoint import (
    CheckpointError,
    CorruptCheckpointError,
    ModelCheckpoint,
    ShapeMismatchError,
    TrainingMeta,
)
from .config import MODEL_PRESETS, ModelConfig, TrainConfig, learning_rate
from .train import StageResult, TrainingDiverged, batch_stream, make_batches, sampled_stream, train_stage, validation_nll
from .transformer import (
    Batch,
    ModelInputError,
    Params,
    collate,
    encode,
    forward,
    init_params,
    loss_and_grads,
    next_token_logprobs,
    pad_to,
    param_shapes,
    smoothed_targets,
    token_nll,
)
