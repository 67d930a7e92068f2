"""Adapters, per-family configuration and the training harness."""

from mitovl.models.adapters import (
    Adapter,
    AdapterError,
    decide,
    device_from_env,
    positive_scores,
    supports,
    zero_shot_classify,
)
from mitovl.models.config import (
    FAMILIES,
    AdapterKind,
    FamilySpec,
    Objective,
    Optimizer,
    Schedule,
    TrainConfig,
    get_family,
    lr_at,
)
from mitovl.models.data import TileSource
from mitovl.models.factory import BuildError, build_adapter, build_pretext
from mitovl.models.train import (
    FinetuneResult,
    TrainingDiverged,
    TrainingError,
    TransferError,
    finetune,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_simsiam,
    train_stain_pretext,
    transfer_pretext_weights,
)

__all__ = [
    "Adapter", "AdapterError", "AdapterKind", "BuildError", "FAMILIES", "FamilySpec", "FinetuneResult",
    "Objective", "Optimizer", "Schedule", "TileSource", "TrainConfig", "TrainingDiverged", "TrainingError",
    "TransferError", "build_adapter", "build_pretext", "decide", "device_from_env", "finetune", "get_family",
    "load_checkpoint", "lr_at", "positive_scores", "predict", "save_checkpoint", "supports",
    "train_simsiam", "train_stain_pretext", "transfer_pretext_weights", "zero_shot_classify",
]
