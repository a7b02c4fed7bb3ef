"""Units-to-mel conditional flow-matching decoder."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import DESK_DECODER, DESK_TRAIN, PAPER_DECODER, PAPER_TRAIN, DecoderConfig, TrainConfig
from .flow import (
    FlowPoint,
    TrainingBatch,
    flow_matching_loss,
    masked_mse,
    ot_path,
    sample,
    sample_mask,
    sway_schedule,
    training_step,
)
from .model import UnitToMelDiT
from .train import Utterance, make_batch, train_decoder

__all__ = [
    "Checkpoint",
    "DESK_DECODER",
    "DESK_TRAIN",
    "DecoderConfig",
    "FlowPoint",
    "PAPER_DECODER",
    "PAPER_TRAIN",
    "TrainConfig",
    "TrainingBatch",
    "UnitToMelDiT",
    "Utterance",
    "flow_matching_loss",
    "load_checkpoint",
    "make_batch",
    "masked_mse",
    "ot_path",
    "sample",
    "sample_mask",
    "save_checkpoint",
    "sway_schedule",
    "train_decoder",
    "training_step",
]
