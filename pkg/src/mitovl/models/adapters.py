"""Adapter contracts shared by real checkpoints and desk-scale stand-ins.

An adapter wraps a torch module and exposes only what the harness needs for
its kind:

* IMAGE_CLASSIFIER: ``class_logits(pixels)``
* IMAGE_TEXT_SCORER: ``similarities(pixels, texts)`` and ``embed(pixels, texts)``
* CAPTION_GENERATOR / VQA_ANSWERER: ``candidate_loglik``, ``generate`` and
  ``target_logits`` (teacher-forced logits for the NLL objective)

``pixels`` are always uint8 arrays of shape ``(B, H, W, 3)``.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from mitovl.ingest import Label
from mitovl.models.config import AdapterKind
from mitovl.prompts import PromptBundle, PromptMode

GENERATIVE = (AdapterKind.CAPTION_GENERATOR, AdapterKind.VQA_ANSWERER)
MODE_KINDS = {
    PromptMode.CLIP_LABEL: (AdapterKind.IMAGE_TEXT_SCORER,),
    PromptMode.BLIP_BINARY_CAPTION: (AdapterKind.CAPTION_GENERATOR,),
    PromptMode.BLIP_COMPLETE_CAPTION: (AdapterKind.CAPTION_GENERATOR,),
    PromptMode.BLIP_VQA: (AdapterKind.VQA_ANSWERER,),
}


class AdapterError(TypeError):
    pass


def device_from_env() -> torch.device:
    return torch.device(os.environ.get("MITOVL_DEVICE", "cpu"))


class Adapter:
    kind: AdapterKind = AdapterKind.IMAGE_CLASSIFIER
    trainable: bool = True
    generative_scoring: bool = False

    def __init__(self, module: torch.nn.Module | None = None, device=None):
        self.module = module
        self.device = torch.device(device) if device is not None else device_from_env()
        if module is not None:
            module.to(self.device)

    @property
    def capabilities(self) -> dict:
        return {"trainable": self.trainable, "generative_scoring": self.generative_scoring}

    def parameters(self):
        return self.module.parameters() if self.module is not None else iter(())

    def train(self):
        if self.module is not None:
            self.module.train()

    def eval(self):
        if self.module is not None:
            self.module.eval()

    def state_dict(self) -> dict:
        return self.module.state_dict() if self.module is not None else {}

    def load_state_dict(self, state: dict) -> None:
        if self.module is not None:
            self.module.load_state_dict(state)

    def extra_state(self) -> dict:
        """JSON-serialisable state outside the module (e.g. a vocabulary)."""
        return {}

    def load_extra_state(self, state: dict) -> None:
        pass

    def fit_text(self, bundles) -> None:
        """Hook for adapters that build their vocabulary from training prompts."""

    # subclasses implement the methods matching their kind


def supports(adapter: Adapter, mode: PromptMode | None) -> bool:
    if mode is None:
        return adapter.kind is AdapterKind.IMAGE_CLASSIFIER
    return adapter.kind in MODE_KINDS[PromptMode(mode)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def positive_scores(adapter: Adapter, pixels: np.ndarray, pairs) -> np.ndarray:
    """Score of MITOTIC in [0, 1] for each image.

    ``pairs`` holds one ``(negative_bundle, positive_bundle)`` per image and is
    ignored for classifiers. Scorers use a two-way softmax over similarities;
    generative adapters the same softmax over summed answer log-likelihoods.
    """
    if adapter.kind is AdapterKind.IMAGE_CLASSIFIER:
        with torch.no_grad():
            logits = adapter.class_logits(pixels).double()
        return torch.softmax(logits, dim=1)[:, 1].cpu().numpy()
    pairs = list(pairs)
    if len(pairs) != len(pixels):
        raise AdapterError("need one bundle pair per image")
    mode = pairs[0][1].mode
    if not supports(adapter, mode):
        raise AdapterError(f"{type(adapter).__name__} ({adapter.kind.value}) cannot score {mode.value} prompts")
    if adapter.kind is AdapterKind.IMAGE_TEXT_SCORER:
        texts = [pairs[0][0].target_text, pairs[0][1].target_text]
        if any([p[0].target_text, p[1].target_text] != texts for p in pairs):
            raise AdapterError("CLIP-style scoring expects the same two class texts for every image")
        sims = np.asarray(adapter.similarities(pixels, texts), dtype=np.float64)
        return _sigmoid(sims[:, 1] - sims[:, 0])
    questions = [p[1].question for p in pairs]
    candidates = [[p[0].target_text, p[1].target_text] for p in pairs]
    ll = np.asarray(adapter.candidate_loglik(pixels, questions, candidates), dtype=np.float64)
    return _sigmoid(ll[:, 1] - ll[:, 0])


def decide(score: float) -> Label:
    """Threshold at 0.5; an exact tie goes to HARD_NEGATIVE."""
    return Label.MITOTIC if score > 0.5 else Label.HARD_NEGATIVE


def zero_shot_classify(adapter: Adapter, tile_pixels: np.ndarray, bundle_pair) -> tuple[Label, float]:
    """Predict one tile from the two label prompts; returns ``(label, P(MITOTIC))``."""
    neg, pos = bundle_pair
    if not isinstance(neg, PromptBundle) or neg.label is not Label.HARD_NEGATIVE or pos.label is not Label.MITOTIC:
        raise AdapterError("bundle_pair must be (HARD_NEGATIVE bundle, MITOTIC bundle)")
    score = float(positive_scores(adapter, np.asarray(tile_pixels)[None], [(neg, pos)])[0])
    return decide(score), score
