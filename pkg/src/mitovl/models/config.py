"""Training configuration, per-family defaults and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

from mitovl.prompts import PromptMode


class AdapterKind(str, Enum):
    IMAGE_TEXT_SCORER = "IMAGE_TEXT_SCORER"
    CAPTION_GENERATOR = "CAPTION_GENERATOR"
    VQA_ANSWERER = "VQA_ANSWERER"
    IMAGE_CLASSIFIER = "IMAGE_CLASSIFIER"


class Optimizer(str, Enum):
    ADAM = "ADAM"
    SGD_MOMENTUM = "SGD_MOMENTUM"
    ADAMW = "ADAMW"


class Schedule(str, Enum):
    CONSTANT = "CONSTANT"
    COSINE_WITH_WARMUP = "COSINE_WITH_WARMUP"


class Objective(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    AUTOREGRESSIVE_NLL = "autoregressive_nll"
    CLIP_SYMMETRIC_INFONCE = "clip_symmetric_infonce"
    STAIN_MSE = "stain_mse"
    SIMSIAM = "simsiam"


UNSPECIFIED = "unspecified-in-published-recipe"


@dataclass(frozen=True)
class TrainConfig:
    family: str
    batch_size: int
    learning_rate: float
    optimizer: Optimizer
    schedule: Schedule = Schedule.CONSTANT
    max_epochs: int = 10
    warmup_fraction: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    early_stop_metric: str = "val_f1"
    seed: int = 0
    max_steps_per_epoch: int | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides) if overrides else self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.value
        d["schedule"] = self.schedule.value
        return d


def lr_at(step: int, total_steps: int, peak: float, warmup_steps: int, schedule: Schedule) -> float:
    """Learning rate before optimizer step ``step`` (0-based, ``0 <= step <= total_steps``).

    Cosine-with-warmup ramps linearly to ``peak`` at ``warmup_steps`` and then
    follows a half cosine to 0 at ``total_steps``.
    """
    schedule = Schedule(schedule)
    if schedule is Schedule.CONSTANT:
        return peak
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class FamilySpec:
    """One row of the model roster."""

    id: str
    kind: AdapterKind
    pretraining: str
    finetuning: str
    builder: str
    train: TrainConfig | None  # None for zero-shot families
    prompt_mode: PromptMode | None = None
    objective: Objective | None = None
    pretext: str | None = None  # family id of a pretext stage whose backbone is transferred
    no_metadata: bool = False
    checkpoint: str | None = None

    @property
    def zero_shot(self) -> bool:
        return self.train is None


_PUBLISHED = {"source": "published recipe"}
_PUBLISHED_EPOCHS = {"source": "published recipe", "max_epochs": UNSPECIFIED, "warmup_fraction": UNSPECIFIED}
_DESK = {"source": "desk-scale default", "note": UNSPECIFIED}


def _cfg(family, bs, lr, opt, sched=Schedule.CONSTANT, epochs=10, prov=_PUBLISHED_EPOCHS, **kw):
    return TrainConfig(family, bs, lr, opt, sched, max_epochs=epochs, provenance=dict(prov), **kw)


def _adamw(family, bs, lr):
    return _cfg(family, bs, lr, Optimizer.ADAMW, Schedule.COSINE_WITH_WARMUP, weight_decay=0.01)


_K = AdapterKind
_P = PromptMode
_O = Objective

FAMILIES: dict[str, FamilySpec] = {
    f.id: f
    for f in [
        # vision-only baselines
        FamilySpec("resnet50-random", _K.IMAGE_CLASSIFIER, "None", "ResNet50", "torchvision:resnet50",
                   _cfg("resnet50-random", 32, 1e-4, Optimizer.ADAM), objective=_O.CROSS_ENTROPY),
        FamilySpec("resnet50-imagenet", _K.IMAGE_CLASSIFIER, "ResNet50 on ImageNet data", "ResNet50",
                   "torchvision:resnet50:imagenet", _cfg("resnet50-imagenet", 32, 1e-4, Optimizer.ADAM),
                   objective=_O.CROSS_ENTROPY),
        FamilySpec("resnet50-stain-ssl", _K.IMAGE_CLASSIFIER, "SSL stain prediction on MIDOG22", "ResNet50",
                   "torchvision:resnet50", _cfg("resnet50-stain-ssl", 32, 1e-4, Optimizer.ADAM),
                   objective=_O.CROSS_ENTROPY, pretext="stain-pretext"),
        FamilySpec("resnet50-simsiam-ssl", _K.IMAGE_CLASSIFIER, "SSL SimSiam on MIDOG22", "ResNet50",
                   "torchvision:resnet50", _cfg("resnet50-simsiam-ssl", 32, 1e-4, Optimizer.ADAM),
                   objective=_O.CROSS_ENTROPY, pretext="simsiam-pretext"),
        FamilySpec("vit-b16-imagenet", _K.IMAGE_CLASSIFIER, "ViT-B/16 on ImageNet data", "ViT-B/16",
                   "torchvision:vit_b_16:imagenet", _cfg("vit-b16-imagenet", 32, 1e-4, Optimizer.ADAM),
                   objective=_O.CROSS_ENTROPY),
        # pretext stages
        FamilySpec("stain-pretext", _K.IMAGE_CLASSIFIER, "-", "stain prediction", "pretext:stain",
                   _cfg("stain-pretext", 32, 1e-4, Optimizer.ADAM), objective=_O.STAIN_MSE),
        FamilySpec("simsiam-pretext", _K.IMAGE_CLASSIFIER, "-", "SimSiam", "pretext:simsiam",
                   _cfg("simsiam-pretext", 128, 0.005, Optimizer.SGD_MOMENTUM, momentum=0.9),
                   objective=_O.SIMSIAM),
        # vision-language
        FamilySpec("clip-zero-shot", _K.IMAGE_TEXT_SCORER, "CLIP on Internet crawled data", "None (zero-shot)",
                   "hf:clip", None, _P.CLIP_LABEL, checkpoint="openai/clip-vit-base-patch32"),
        FamilySpec("clip-finetune", _K.IMAGE_TEXT_SCORER, "CLIP on Internet crawled data", "CLIP", "hf:clip",
                   _adamw("clip-finetune", 512, 1e-4), _P.CLIP_LABEL, _O.CLIP_SYMMETRIC_INFONCE,
                   checkpoint="openai/clip-vit-base-patch32"),
        FamilySpec("blip-vqa-zero-shot", _K.VQA_ANSWERER, "BLIP VQA on VQA2.0 data", "None (zero-shot)",
                   "hf:blip-vqa", None, _P.BLIP_VQA, no_metadata=True, checkpoint="Salesforce/blip-vqa-base"),
        FamilySpec("blip-vqa-zero-shot-metadata", _K.VQA_ANSWERER, "BLIP VQA on VQA2.0 data",
                   "None (zero-shot) w/metadata", "hf:blip-vqa", None, _P.BLIP_VQA,
                   checkpoint="Salesforce/blip-vqa-base"),
        FamilySpec("blip-binary-caption", _K.CAPTION_GENERATOR, "BLIP image caption on COCO data",
                   "BLIP binary caption", "hf:blip-caption", _adamw("blip-binary-caption", 32, 1e-5),
                   _P.BLIP_BINARY_CAPTION, _O.AUTOREGRESSIVE_NLL,
                   checkpoint="Salesforce/blip-image-captioning-base"),
        FamilySpec("blip-complete-caption", _K.CAPTION_GENERATOR, "BLIP image caption on COCO data",
                   "BLIP complete caption", "hf:blip-caption", _adamw("blip-complete-caption", 32, 1e-5),
                   _P.BLIP_COMPLETE_CAPTION, _O.AUTOREGRESSIVE_NLL,
                   checkpoint="Salesforce/blip-image-captioning-base"),
        FamilySpec("blip-vqa", _K.VQA_ANSWERER, "BLIP VQA on VQA2.0 data", "BLIP VQA", "hf:blip-vqa",
                   _adamw("blip-vqa", 32, 1e-5), _P.BLIP_VQA, _O.AUTOREGRESSIVE_NLL,
                   checkpoint="Salesforce/blip-vqa-base"),
        # desk-scale stand-ins with the same adapter contracts
        FamilySpec("tiny-cnn", _K.IMAGE_CLASSIFIER, "None", "TinyCNN", "tiny:cnn",
                   _cfg("tiny-cnn", 32, 3e-3, Optimizer.ADAM, epochs=6, prov=_DESK), objective=_O.CROSS_ENTROPY),
        FamilySpec("tiny-cnn-stain-ssl", _K.IMAGE_CLASSIFIER, "SSL stain prediction (synthetic)", "TinyCNN",
                   "tiny:cnn", _cfg("tiny-cnn-stain-ssl", 32, 3e-3, Optimizer.ADAM, epochs=6, prov=_DESK),
                   objective=_O.CROSS_ENTROPY, pretext="tiny-stain-pretext"),
        FamilySpec("tiny-cnn-simsiam-ssl", _K.IMAGE_CLASSIFIER, "SSL SimSiam (synthetic)", "TinyCNN", "tiny:cnn",
                   _cfg("tiny-cnn-simsiam-ssl", 32, 3e-3, Optimizer.ADAM, epochs=6, prov=_DESK),
                   objective=_O.CROSS_ENTROPY, pretext="tiny-simsiam-pretext"),
        FamilySpec("tiny-stain-pretext", _K.IMAGE_CLASSIFIER, "-", "stain prediction", "pretext:tiny-stain",
                   _cfg("tiny-stain-pretext", 32, 1e-3, Optimizer.ADAM, epochs=1, prov=_DESK),
                   objective=_O.STAIN_MSE),
        FamilySpec("tiny-simsiam-pretext", _K.IMAGE_CLASSIFIER, "-", "SimSiam", "pretext:tiny-simsiam",
                   _cfg("tiny-simsiam-pretext", 128, 0.005, Optimizer.SGD_MOMENTUM, epochs=1, prov=_DESK),
                   objective=_O.SIMSIAM),
        FamilySpec("tiny-clip", _K.IMAGE_TEXT_SCORER, "None", "TinyCLIP", "tiny:clip",
                   _cfg("tiny-clip", 64, 5e-3, Optimizer.ADAMW, Schedule.COSINE_WITH_WARMUP, epochs=10, prov=_DESK),
                   _P.CLIP_LABEL, _O.CLIP_SYMMETRIC_INFONCE),
        FamilySpec("tiny-binary-caption", _K.CAPTION_GENERATOR, "None", "Tiny binary caption", "tiny:generative",
                   _cfg("tiny-binary-caption", 32, 5e-3, Optimizer.ADAMW, Schedule.COSINE_WITH_WARMUP, epochs=10,
                        prov=_DESK), _P.BLIP_BINARY_CAPTION, _O.AUTOREGRESSIVE_NLL),
        FamilySpec("tiny-complete-caption", _K.CAPTION_GENERATOR, "None", "Tiny complete caption",
                   "tiny:generative",
                   _cfg("tiny-complete-caption", 32, 5e-3, Optimizer.ADAMW, Schedule.COSINE_WITH_WARMUP, epochs=10,
                        prov=_DESK), _P.BLIP_COMPLETE_CAPTION, _O.AUTOREGRESSIVE_NLL),
        FamilySpec("tiny-vqa", _K.VQA_ANSWERER, "None", "Tiny VQA", "tiny:generative",
                   _cfg("tiny-vqa", 32, 5e-3, Optimizer.ADAMW, Schedule.COSINE_WITH_WARMUP, epochs=10, prov=_DESK),
                   _P.BLIP_VQA, _O.AUTOREGRESSIVE_NLL),
        FamilySpec("stub-vqa-zero-shot", _K.VQA_ANSWERER, "stub", "None (zero-shot)", "stub:vqa", None,
                   _P.BLIP_VQA),
        FamilySpec("stub-vqa-dark-zero-shot", _K.VQA_ANSWERER, "dark-pixel heuristic", "None (zero-shot)",
                   "stub:vqa-dark", None, _P.BLIP_VQA),
    ]
}


def get_family(family_id: str) -> FamilySpec:
    try:
        return FAMILIES[family_id]
    except KeyError:
        raise KeyError(f"unknown model family {family_id!r}; known: {', '.join(sorted(FAMILIES))}") from None
