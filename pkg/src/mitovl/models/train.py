"""Finetuning, prediction, pretext training and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mitovl import objectives
from mitovl.eval import PredictionSet, f1_score
from mitovl.ingest import Label
from mitovl.models import torch_losses
from mitovl.models.adapters import GENERATIVE, Adapter, AdapterError, decide, positive_scores, supports
from mitovl.models.config import AdapterKind, Objective, Optimizer, TrainConfig, lr_at
from mitovl.models.data import TileSource, batch_order, bundles_for, pairs_for, prefetch
from mitovl.prompts import PromptMode, PromptTemplates, caption_exact_match, parse_prediction

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


class TransferError(ValueError):
    pass


_OBJECTIVE_KIND = {
    Objective.CROSS_ENTROPY: (AdapterKind.IMAGE_CLASSIFIER,),
    Objective.CLIP_SYMMETRIC_INFONCE: (AdapterKind.IMAGE_TEXT_SCORER,),
    Objective.AUTOREGRESSIVE_NLL: GENERATIVE,
}


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer is Optimizer.ADAM:
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.optimizer is Optimizer.ADAMW:
        return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    steps = math.ceil(n / cfg.batch_size)
    if cfg.max_steps_per_epoch is not None:
        steps = min(steps, cfg.max_steps_per_epoch)
    return steps


class _Schedule:
    def __init__(self, opt, cfg: TrainConfig, total_steps: int):
        self.opt, self.cfg, self.total = opt, cfg, total_steps
        self.warmup = int(round(cfg.warmup_fraction * total_steps))

    def set(self, step: int) -> float:
        lr = lr_at(step, self.total, self.cfg.learning_rate, self.warmup, self.cfg.schedule)
        for g in self.opt.param_groups:
            g["lr"] = lr
        return lr


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss).item():
        raise TrainingDiverged(f"non-finite loss ({loss.item()}) at {where}")


def objective_loss(adapter: Adapter, objective: Objective, pixels, tiles, bundles) -> torch.Tensor:
    """Mini-batch training loss; NLL uses the per-token mean for stable step sizes."""
    if objective is Objective.CROSS_ENTROPY:
        labels = torch.tensor([t.label is Label.MITOTIC for t in tiles], dtype=torch.long, device=adapter.device)
        return F.cross_entropy(adapter.class_logits(pixels), labels)
    if objective is Objective.CLIP_SYMMETRIC_INFONCE:
        u, v, tau = adapter.embed(pixels, [b.target_text for b in bundles])
        return torch_losses.clip_symmetric_infonce(u, v, tau)
    if objective is Objective.AUTOREGRESSIVE_NLL:
        logits, tgt, lengths = adapter.target_logits(
            pixels, [b.question for b in bundles], [b.target_text for b in bundles]
        )
        return torch_losses.autoregressive_nll(logits, tgt, lengths, reduction="mean_token")
    raise TrainingError(f"objective {objective.value} is not a finetuning objective")


@dataclass
class FinetuneResult:
    adapter: Adapter
    events: list[dict]
    best_epoch: int
    best_val_f1: float
    initial_state: dict = field(default_factory=dict, repr=False)


def _clone_state(adapter: Adapter) -> dict:
    return {k: v.detach().clone() for k, v in adapter.state_dict().items()}


def finetune(
    adapter: Adapter,
    split,
    cfg: TrainConfig,
    objective: Objective,
    source: TileSource,
    mode: PromptMode | None = None,
    templates: PromptTemplates = PromptTemplates(),
    no_metadata: bool = False,
    on_event=None,
    prefetch_depth: int = 2,
    eval_batch_size: int = 64,
) -> FinetuneResult:
    """Train on ``split.train``, keep the weights with the best validation F1.

    Every optimizer step emits ``{"event": "step", ...}`` with loss and learning
    rate; every epoch emits the sample-weighted mean loss and validation F1.
    """
    objective = Objective(objective)
    if not adapter.trainable:
        raise AdapterError(f"{type(adapter).__name__} is not trainable")
    if adapter.kind not in _OBJECTIVE_KIND.get(objective, ()):
        raise AdapterError(f"objective {objective.value} does not apply to {adapter.kind.value} adapters")
    if mode is not None and not supports(adapter, mode):
        raise AdapterError(f"{adapter.kind.value} adapter cannot use {PromptMode(mode).value} prompts")
    train, val = list(split.train), list(split.val)
    if not train:
        raise TrainingError("training partition is empty")
    if not val:
        raise TrainingError("validation partition is empty")

    torch.manual_seed(cfg.seed)
    slides = source.slides
    train_bundles = bundles_for(train, slides, mode, templates, no_metadata)
    if mode is not None:
        adapter.fit_text(train_bundles)
    opt = make_optimizer(adapter.parameters(), cfg)
    spe = _steps_per_epoch(len(train), cfg)
    sched = _Schedule(opt, cfg, spe * cfg.max_epochs)
    events: list[dict] = []

    def emit(ev):
        events.append(ev)
        if on_event is not None:
            on_event(ev)

    initial = _clone_state(adapter)
    best_state, best_f1, best_epoch = initial, -1.0, -1
    step = 0
    for epoch in range(cfg.max_epochs):
        adapter.train()
        order = batch_order(len(train), cfg.batch_size, seed=cfg.seed, epoch=epoch)[:spe]
        total, count = 0.0, 0
        for idx, pixels in prefetch(order, lambda b: source.pixels([train[i] for i in b]), prefetch_depth):
            lr = sched.set(step)
            tiles = [train[i] for i in idx]
            loss = objective_loss(adapter, objective, pixels, tiles, [train_bundles[i] for i in idx])
            _check_finite(loss, f"epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            value = float(loss.item())
            total += value * len(idx)
            count += len(idx)
            emit({"event": "step", "epoch": epoch, "step": step, "loss": value, "lr": lr})
            step += 1
        preds = predict(adapter, val, source, mode, templates, no_metadata, batch_size=eval_batch_size,
                        seed=cfg.seed, family=cfg.family)
        val_f1 = f1_score(preds)
        emit({"event": "epoch", "epoch": epoch, "loss": total / count, "val_f1": val_f1})
        if val_f1 > best_f1:
            best_f1, best_epoch, best_state = val_f1, epoch, _clone_state(adapter)
    adapter.load_state_dict(best_state)
    adapter.eval()
    emit({"event": "selected", "epoch": best_epoch, "val_f1": best_f1})
    return FinetuneResult(adapter, events, best_epoch, best_f1, initial)


def predict(
    adapter: Adapter,
    tiles,
    source: TileSource,
    mode: PromptMode | None = None,
    templates: PromptTemplates = PromptTemplates(),
    no_metadata: bool = False,
    batch_size: int = 64,
    seed: int = 0,
    family: str = "",
    prefetch_depth: int = 2,
) -> PredictionSet:
    """Score and label every tile.

    Generative adapters label by parsing their generated text; the score is
    the two-candidate likelihood softmax, so AUC stays defined even when the
    generated text does not parse.
    """
    tiles = list(tiles)
    if mode is None and adapter.kind is not AdapterKind.IMAGE_CLASSIFIER:
        raise AdapterError(f"{adapter.kind.value} adapter needs a prompt mode")
    slides = source.slides
    pairs = pairs_for(tiles, slides, mode, templates, no_metadata)
    truth = bundles_for(tiles, slides, mode, templates, no_metadata) if mode is not None else None
    generative = adapter.kind in GENERATIVE
    scores = np.zeros(len(tiles))
    pred = np.zeros(len(tiles), dtype=bool)
    ok = np.ones(len(tiles), dtype=bool)
    generated: list[str] = [""] * len(tiles)
    adapter.eval()
    order = batch_order(len(tiles), batch_size)
    for idx, pixels in prefetch(order, lambda b: source.pixels([tiles[i] for i in b]), prefetch_depth):
        s = positive_scores(adapter, pixels, [pairs[i] for i in idx])
        scores[idx] = s
        if generative:
            texts = adapter.generate(pixels, [pairs[i][1].question for i in idx])
            for i, text in zip(idx, texts):
                label, parsed = parse_prediction(mode, text)
                pred[i], ok[i], generated[i] = label is Label.MITOTIC, parsed, text
        else:
            pred[idx] = [decide(x) is Label.MITOTIC for x in s]
    exact = None
    if generative and PromptMode(mode) is PromptMode.BLIP_COMPLETE_CAPTION:
        exact = [caption_exact_match(g, b.target_text) for g, b in zip(generated, truth)]
    return PredictionSet(
        true_labels=[t.label is Label.MITOTIC for t in tiles],
        pred_labels=pred,
        scores=scores,
        parse_ok=ok,
        seed=seed,
        family=family,
        tile_ids=[t.key for t in tiles],
        slide_ids=[t.slide_id for t in tiles],
        exact_match=exact,
        generated=generated if generative else None,
    )


# ---------------------------------------------------------------------------
# pretext stages


def backbone_features(backbone: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Spatial feature map of a tiny or torchvision ResNet backbone."""
    if hasattr(backbone, "features"):
        return backbone.features(x)
    b = backbone
    x = b.maxpool(b.relu(b.bn1(b.conv1(x))))
    return b.layer4(b.layer3(b.layer2(b.layer1(x))))


def _pool_np(a: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return a
    n, h, w = a.shape
    return a[:, : h - h % k, : w - w % k].reshape(n, h // k, k, w // k, k).mean(axis=(2, 4))


def stain_targets(pixels: np.ndarray, downsample: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    """(E input, H target) tensors of shape ``(B, 1, H/d, W/d)``."""
    e, h = zip(*(objectives.stain_pretext_pair(p) for p in pixels))
    e = _pool_np(np.stack(e), downsample)
    h = _pool_np(np.stack(h), downsample)
    return torch.from_numpy(e).float()[:, None], torch.from_numpy(h).float()[:, None]


def _pretext_loop(net, tiles, source, cfg, loss_fn, on_event=None, prefetch_depth=2) -> list[dict]:
    tiles = list(tiles)
    if not tiles:
        raise TrainingError("pretext training needs at least one tile")
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(net.parameters(), cfg)
    spe = _steps_per_epoch(len(tiles), cfg)
    sched = _Schedule(opt, cfg, spe * cfg.max_epochs)
    events, step = [], 0
    net.train()
    for epoch in range(cfg.max_epochs):
        order = batch_order(len(tiles), cfg.batch_size, seed=cfg.seed, epoch=epoch)[:spe]
        for idx, pixels in prefetch(order, lambda b: source.pixels([tiles[i] for i in b]), prefetch_depth):
            lr = sched.set(step)
            loss = loss_fn(pixels, step)
            _check_finite(loss, f"pretext epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ev = {"event": "step", "epoch": epoch, "step": step, "loss": float(loss.item()), "lr": lr}
            events.append(ev)
            if on_event is not None:
                on_event(ev)
            step += 1
    net.eval()
    return events


def train_stain_pretext(net: nn.Module, tiles, source: TileSource, cfg: TrainConfig, downsample: int = 4,
                        device=None, on_event=None) -> list[dict]:
    """Regress the haematoxylin map from the eosin map (MSE)."""
    device = device or next(net.parameters()).device

    def loss_fn(pixels, _step):
        e, h = stain_targets(pixels, downsample)
        out = net(e.to(device))
        if out.shape[-2:] != h.shape[-2:]:
            out = F.interpolate(out, size=h.shape[-2:], mode="bilinear", align_corners=False)
        return F.mse_loss(out, h.to(device))

    return _pretext_loop(net, tiles, source, cfg, loss_fn, on_event)


def augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random flips, 90 degree rotations and brightness/contrast jitter."""
    n = x.shape[0]
    out = []
    r = torch.rand(n, 4, generator=gen)
    for i in range(n):
        xi = x[i]
        if r[i, 0] < 0.5:
            xi = xi.flip(-1)
        xi = torch.rot90(xi, int(r[i, 1] * 4) % 4, dims=(-2, -1))
        xi = (xi - xi.mean()) * (0.6 + 0.8 * r[i, 2]) + xi.mean() + (r[i, 3] - 0.5)
        out.append(xi)
    return torch.stack(out)


def train_simsiam(net: nn.Module, tiles, source: TileSource, cfg: TrainConfig, to_input, device=None,
                  on_event=None) -> list[dict]:
    """SimSiam on two augmented views; ``to_input`` maps uint8 pixels to the backbone input."""
    device = device or next(net.parameters()).device
    gen = torch.Generator().manual_seed(cfg.seed)

    def loss_fn(pixels, _step):
        x = to_input(pixels).cpu()
        if x.shape[0] < 2:
            raise TrainingError("SimSiam needs batches of at least 2 tiles (batch norm)")
        p1, p2, z1, z2 = net(augment(x, gen).to(device), augment(x, gen).to(device))
        return torch_losses.simsiam_loss(p1, p2, z1, z2)

    return _pretext_loop(net, tiles, source, cfg, loss_fn, on_event)


def transfer_pretext_weights(pretext, target: Adapter) -> dict:
    """Copy ``backbone.*`` tensors into ``target``'s backbone and re-initialise its head.

    ``pretext`` is a module with a ``backbone`` attribute or a state dict.
    Decoder, projector and predictor tensors are ignored. Returns which
    tensors were copied, which were freshly initialised and which ignored.
    """
    if isinstance(pretext, nn.Module):
        full = pretext.state_dict()
    else:
        full = dict(pretext)
    src = {k[len("backbone."):]: v for k, v in full.items() if k.startswith("backbone.")}
    dst = target.backbone.state_dict()
    missing = sorted(k for k in dst if k not in src)
    if missing:
        raise TransferError(f"pretext backbone lacks {len(missing)} tensors, e.g. {missing[:3]}")
    bad = sorted(k for k in dst if tuple(src[k].shape) != tuple(dst[k].shape))
    if bad:
        k = bad[0]
        raise TransferError(f"shape mismatch for {k}: {tuple(src[k].shape)} vs {tuple(dst[k].shape)}")
    target.backbone.load_state_dict({k: src[k] for k in dst})
    for m in target.head.modules():
        if hasattr(m, "reset_parameters"):
            m.reset_parameters()
    return {
        "copied": ["backbone." + k for k in sorted(dst)],
        "new": ["head." + k for k in sorted(target.head.state_dict())],
        "ignored": sorted(k for k in full if not k.startswith("backbone.") or k[len("backbone."):] not in dst),
    }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(adapter: Adapter, directory, cfg: TrainConfig | None = None, events=(), extra: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(adapter.state_dict(), d / "weights.pt")
    (d / "extra_state.json").write_text(json.dumps(adapter.extra_state(), sort_keys=True))
    meta = {"adapter": type(adapter).__name__, "kind": adapter.kind.value}
    if cfg is not None:
        meta["train_config"] = cfg.to_dict()
    if extra:
        meta.update(extra)
    (d / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    with open(d / "events.jsonl", "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    return d


def load_checkpoint(adapter: Adapter, directory) -> Adapter:
    d = Path(directory)
    extra = d / "extra_state.json"
    if extra.exists():
        adapter.load_extra_state(json.loads(extra.read_text()))
    if (d / "weights.pt").exists():
        adapter.load_state_dict(torch.load(d / "weights.pt", map_location=adapter.device, weights_only=True))
    adapter.eval()
    return adapter


def read_events(directory) -> list[dict]:
    path = Path(directory) / "events.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
