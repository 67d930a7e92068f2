"""Build adapters and pretext networks from a family's builder string."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mitovl.models.adapters import Adapter, device_from_env
from mitovl.models.config import FamilySpec
from mitovl.models.tiny import (
    SimSiamNet,
    StainPretextNet,
    StubVQAAdapter,
    TinyBackbone,
    TinyCNNClassifier,
    TinyClipScorer,
    TinyGenerativeAdapter,
    dark_fraction_logodds,
    to_tensor,
)
from mitovl.models.train import backbone_features


class BuildError(ValueError):
    pass


def build_adapter(spec: FamilySpec, device=None, seed: int = 0, checkpoint: str | None = None) -> Adapter:
    """Fresh adapter for ``spec``; ``seed`` fixes random initialisation.

    ``checkpoint`` overrides the Hugging Face name or local path for ``hf:`` builders.
    """
    torch.manual_seed(seed)
    device = device or device_from_env()
    parts = spec.builder.split(":")
    src, name = parts[0], parts[1] if len(parts) > 1 else ""
    if src == "tiny":
        if name == "cnn":
            return TinyCNNClassifier(device=device)
        if name == "clip":
            return TinyClipScorer(device=device)
        if name == "generative":
            return TinyGenerativeAdapter(kind=spec.kind, device=device)
    elif src == "stub" and name == "vqa":
        return StubVQAAdapter(device=device)
    elif src == "stub" and name == "vqa-dark":
        return StubVQAAdapter(score_fn=dark_fraction_logodds, device=device)
    elif src == "torchvision":
        from mitovl.models.hf import TorchvisionClassifier

        return TorchvisionClassifier(name, pretrained=len(parts) > 2 and parts[2] == "imagenet", device=device)
    elif src == "hf":
        from mitovl.models import hf

        ckpt = checkpoint or spec.checkpoint
        cls = {"clip": hf.ClipAdapter, "blip-vqa": hf.BlipVQAAdapter, "blip-caption": hf.BlipCaptionAdapter}.get(name)
        if cls is not None:
            return cls.from_pretrained(ckpt, device=device)
    raise BuildError(f"unknown builder {spec.builder!r} for family {spec.id}")


class ResNetStainPretext(nn.Module):
    """ResNet trunk plus a light decoder that upsamples back to the input size."""

    def __init__(self, backbone: nn.Module, feat_channels: int = 2048):
        super().__init__()
        self.backbone = backbone
        self.decoder = nn.Sequential(nn.Conv2d(feat_channels, 64, 1), nn.ReLU(), nn.Conv2d(64, 1, 3, padding=1))

    def forward(self, e_channel):
        x = e_channel.expand(-1, 3, -1, -1)
        y = self.decoder(backbone_features(self.backbone, x))
        return F.interpolate(y, size=e_channel.shape[-2:], mode="bilinear", align_corners=False)


def _imagenet_input(device):
    mean = torch.tensor((0.485, 0.456, 0.406))[None, :, None, None]
    std = torch.tensor((0.229, 0.224, 0.225))[None, :, None, None]

    def f(pixels):
        x = torch.from_numpy(np.ascontiguousarray(pixels)).permute(0, 3, 1, 2).float() / 255.0
        return ((x - mean) / std).to(device)

    return f


def build_pretext(spec: FamilySpec, device=None, seed: int = 0):
    """``(net, to_input, stain_downsample)`` for a ``pretext:`` family."""
    torch.manual_seed(seed)
    device = device or device_from_env()
    kind = spec.builder.split(":", 1)[1] if ":" in spec.builder else ""
    if kind == "tiny-stain":
        bb = TinyBackbone(3, 8)
        return StainPretextNet(bb, bb.out_dim).to(device), None, 4
    if kind == "tiny-simsiam":
        bb = TinyBackbone(3, 8)
        return SimSiamNet(bb, bb.out_dim).to(device), lambda p: to_tensor(p, device, 4), None
    if kind in ("stain", "simsiam"):
        import torchvision

        bb = torchvision.models.resnet50(weights=None)
        bb.fc = nn.Identity()
        if kind == "stain":
            return ResNetStainPretext(bb).to(device), None, 1
        return SimSiamNet(bb, 2048, proj_dim=2048, pred_hidden=512).to(device), _imagenet_input(device), None
    raise BuildError(f"unknown pretext builder {spec.builder!r}")
