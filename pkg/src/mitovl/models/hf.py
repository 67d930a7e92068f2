"""Adapters over Hugging Face BLIP and CLIP checkpoints.

``from_pretrained`` needs the released weights locally or network access;
the constructors accept already-built models so tiny random configurations
can exercise the same code paths offline.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from mitovl.models.adapters import Adapter
from mitovl.models.config import AdapterKind

# BLIP and CLIP share the OpenAI normalisation constants
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


def _pixels(pixels: np.ndarray, size: int, device) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(pixels)).to(device).permute(0, 3, 1, 2).float() / 255.0
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False, antialias=True)
    mean = torch.tensor(IMAGE_MEAN, device=device)[None, :, None, None]
    std = torch.tensor(IMAGE_STD, device=device)[None, :, None, None]
    return (x - mean) / std


def _first(out):
    return out if torch.is_tensor(out) else out[0]


def _features(out):
    if torch.is_tensor(out):
        return out
    return out.pooler_output


class _BlipBase(Adapter):
    generative_scoring = True
    max_new_tokens = 20

    def __init__(self, model, tokenizer, image_size: int | None = None, device=None):
        super().__init__(model, device)
        self.tokenizer = tokenizer
        self.image_size = image_size or model.config.vision_config.image_size
        tc = model.config.text_config
        self.bos_id = tc.bos_token_id
        self.sep_id = tc.sep_token_id
        self.pad_id = tc.pad_token_id

    def _tok(self, texts):
        enc = self.tokenizer(list(texts), padding=True, return_tensors="pt")
        return enc["input_ids"].to(self.device), enc["attention_mask"].to(self.device)

    def _target_ids(self, texts):
        ids, mask = self._tok(texts)
        ids = ids.clone()
        ids[:, 0] = self.bos_id
        return ids, mask

    def _decoder_logits(self, ids, mask, cond, cond_mask):
        out = self.module.text_decoder(
            input_ids=ids,
            attention_mask=mask,
            encoder_hidden_states=cond,
            encoder_attention_mask=cond_mask,
            return_dict=True,
        )
        return out.logits

    def _conditioning(self, pixels, questions):
        raise NotImplementedError

    def target_logits(self, pixels, questions, targets):
        cond, cond_mask = self._conditioning(pixels, questions)
        ids, mask = self._target_ids(targets)
        logits = self._decoder_logits(ids, mask, cond, cond_mask)
        # position t predicts token t + 1
        return logits[:, :-1], ids[:, 1:], mask.sum(1) - 1

    def candidate_loglik(self, pixels, questions, candidates):
        k = len(candidates[0])
        out = np.zeros((len(pixels), k))
        with torch.no_grad():
            cond, cond_mask = self._conditioning(pixels, questions)
            for j in range(k):
                ids, mask = self._target_ids([c[j] for c in candidates])
                logits = self._decoder_logits(ids, mask, cond, cond_mask)[:, :-1]
                tgt = ids[:, 1:]
                lp = torch.log_softmax(logits.float(), -1).gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
                out[:, j] = (lp * mask[:, 1:]).sum(1).double().cpu().numpy()
        return out


class BlipVQAAdapter(_BlipBase):
    kind = AdapterKind.VQA_ANSWERER

    @classmethod
    def from_pretrained(cls, name_or_path: str, device=None):
        from transformers import BlipForQuestionAnswering, BlipProcessor

        proc = BlipProcessor.from_pretrained(name_or_path)
        return cls(BlipForQuestionAnswering.from_pretrained(name_or_path), proc.tokenizer, device=device)

    def _conditioning(self, pixels, questions):
        m = self.module
        image_embeds = _first(m.vision_model(pixel_values=_pixels(pixels, self.image_size, self.device)))
        image_mask = torch.ones(image_embeds.shape[:-1], dtype=torch.long, device=self.device)
        q_ids, q_mask = self._tok(questions)
        q_embeds = _first(
            m.text_encoder(
                input_ids=q_ids,
                attention_mask=q_mask,
                encoder_hidden_states=image_embeds,
                encoder_attention_mask=image_mask,
                return_dict=True,
            )
        )
        return q_embeds, q_mask

    def generate(self, pixels, questions=None):
        q_ids, q_mask = self._tok(questions)
        with torch.no_grad():
            out = self.module.generate(
                input_ids=q_ids,
                pixel_values=_pixels(pixels, self.image_size, self.device),
                attention_mask=q_mask,
                max_new_tokens=self.max_new_tokens,
            )
        return [t.strip() for t in self.tokenizer.batch_decode(out, skip_special_tokens=True)]


class BlipCaptionAdapter(_BlipBase):
    kind = AdapterKind.CAPTION_GENERATOR

    @classmethod
    def from_pretrained(cls, name_or_path: str, device=None):
        from transformers import BlipForConditionalGeneration, BlipProcessor

        proc = BlipProcessor.from_pretrained(name_or_path)
        return cls(BlipForConditionalGeneration.from_pretrained(name_or_path), proc.tokenizer, device=device)

    def _conditioning(self, pixels, questions):
        image_embeds = _first(self.module.vision_model(pixel_values=_pixels(pixels, self.image_size, self.device)))
        return image_embeds, torch.ones(image_embeds.shape[:-1], dtype=torch.long, device=self.device)

    def generate(self, pixels, questions=None):
        # no text prompt: decoding starts from BOS only
        n = len(pixels)
        start = torch.full((n, 2), self.sep_id, dtype=torch.long, device=self.device)
        start[:, 0] = self.bos_id
        with torch.no_grad():
            out = self.module.generate(
                pixel_values=_pixels(pixels, self.image_size, self.device),
                input_ids=start,
                max_new_tokens=self.max_new_tokens,
            )
        return [t.strip() for t in self.tokenizer.batch_decode(out, skip_special_tokens=True)]


class ClipAdapter(Adapter):
    kind = AdapterKind.IMAGE_TEXT_SCORER

    def __init__(self, model, tokenizer, image_size: int | None = None, device=None):
        super().__init__(model, device)
        self.tokenizer = tokenizer
        self.image_size = image_size or model.config.vision_config.image_size

    @classmethod
    def from_pretrained(cls, name_or_path: str, device=None):
        from transformers import CLIPModel, CLIPProcessor

        proc = CLIPProcessor.from_pretrained(name_or_path)
        return cls(CLIPModel.from_pretrained(name_or_path), proc.tokenizer, device=device)

    def _image(self, pixels):
        return _features(self.module.get_image_features(pixel_values=_pixels(pixels, self.image_size, self.device)))

    def _text(self, texts):
        enc = self.tokenizer(list(texts), padding=True, return_tensors="pt")
        return _features(
            self.module.get_text_features(
                input_ids=enc["input_ids"].to(self.device), attention_mask=enc["attention_mask"].to(self.device)
            )
        )

    def embed(self, pixels, texts):
        return self._image(pixels), self._text(texts), 1.0 / self.module.logit_scale.exp()

    def similarities(self, pixels, texts):
        with torch.no_grad():
            u = F.normalize(self._image(pixels), dim=1)
            v = F.normalize(self._text(texts), dim=1)
            return (self.module.logit_scale.exp() * u @ v.T).cpu().numpy()


class TorchvisionClassifier(Adapter):
    """ResNet-50 / ViT-B/16 with a two-class head; ``pretrained`` loads ImageNet weights."""

    kind = AdapterKind.IMAGE_CLASSIFIER

    def __init__(self, arch: str = "resnet50", pretrained: bool = False, device=None):
        import torchvision

        if arch == "resnet50":
            weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
            net = torchvision.models.resnet50(weights=weights)
            feat = net.fc.in_features
            net.fc = torch.nn.Identity()
        elif arch == "vit_b_16":
            weights = torchvision.models.ViT_B_16_Weights.IMAGENET1K_V1 if pretrained else None
            net = torchvision.models.vit_b_16(weights=weights)
            feat = net.heads.head.in_features
            net.heads = torch.nn.Identity()
        else:
            raise ValueError(f"unsupported torchvision arch {arch!r}")
        from mitovl.models.tiny import ClassifierNet

        super().__init__(ClassifierNet(net, feat), device)
        self.arch = arch

    @property
    def backbone(self):
        return self.module.backbone

    @property
    def head(self):
        return self.module.head

    def class_logits(self, pixels):
        x = torch.from_numpy(np.ascontiguousarray(pixels)).to(self.device).permute(0, 3, 1, 2).float() / 255.0
        mean = torch.tensor((0.485, 0.456, 0.406), device=self.device)[None, :, None, None]
        std = torch.tensor((0.229, 0.224, 0.225), device=self.device)[None, :, None, None]
        return self.module((x - mean) / std)
