"""Small torch models that honour the adapter contracts at desk scale.

They stand in for ResNet/ViT/CLIP/BLIP when neither GPUs nor released
checkpoints are available, so the harness, objectives and metrics can be
exercised end to end on synthetic corpora.
"""

from __future__ import annotations

import re

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from mitovl.models.adapters import Adapter
from mitovl.models.config import AdapterKind

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<pad>", "<bos>", "<eos>", "<unk>"]


def to_tensor(pixels: np.ndarray, device, downsample: int = 4) -> torch.Tensor:
    """uint8 ``(B, H, W, 3)`` -> float ``(B, 3, H/d, W/d)`` roughly zero-centred."""
    x = torch.from_numpy(np.ascontiguousarray(pixels)).to(device).permute(0, 3, 1, 2).float()
    x = (x / 255.0 - 0.5) / 0.25
    if downsample > 1:
        x = F.avg_pool2d(x, downsample)
    return x


class TinyBackbone(nn.Module):
    """Three conv blocks; ``features`` keeps the spatial map, ``forward`` pools it."""

    def __init__(self, in_channels: int = 3, width: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 5, padding=2)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 4 * width, 3, padding=1)
        self.out_dim = 4 * width

    def features(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return F.relu(self.conv3(x))

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


class ClassifierNet(nn.Module):
    def __init__(self, backbone: nn.Module, feat_dim: int, n_classes: int = 2):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feat_dim, n_classes)

    def forward(self, x):
        return self.head(self.backbone(x))


class TinyCNNClassifier(Adapter):
    kind = AdapterKind.IMAGE_CLASSIFIER

    def __init__(self, width: int = 8, downsample: int = 4, device=None):
        backbone = TinyBackbone(3, width)
        super().__init__(ClassifierNet(backbone, backbone.out_dim), device)
        self.downsample = downsample

    @property
    def backbone(self):
        return self.module.backbone

    @property
    def head(self):
        return self.module.head

    def class_logits(self, pixels):
        return self.module(to_tensor(pixels, self.device, self.downsample))


# ---------------------------------------------------------------------------
# pretext networks


class StainPretextNet(nn.Module):
    """Encoder shared with the classifier backbone plus a small decoder for H-from-E regression.

    The single E channel is replicated to three channels so that the encoder
    has the same topology as the RGB classifier it is transferred into.
    """

    def __init__(self, backbone: nn.Module, feat_channels: int):
        super().__init__()
        self.backbone = backbone
        self.decoder = nn.Sequential(
            nn.Conv2d(feat_channels, 16, 3, padding=1),
            nn.ReLU(),
            nn.Upsample(scale_factor=4, mode="bilinear", align_corners=False),
            nn.Conv2d(16, 1, 3, padding=1),
        )

    def forward(self, e_channel):
        x = e_channel.expand(-1, 3, -1, -1)
        return self.decoder(self.backbone.features(x))


class SimSiamNet(nn.Module):
    def __init__(self, backbone: nn.Module, feat_dim: int, proj_dim: int = 64, pred_hidden: int = 16):
        super().__init__()
        self.backbone = backbone
        self.projector = nn.Sequential(
            nn.Linear(feat_dim, proj_dim),
            nn.BatchNorm1d(proj_dim),
            nn.ReLU(),
            nn.Linear(proj_dim, proj_dim),
            nn.BatchNorm1d(proj_dim),
        )
        self.predictor = nn.Sequential(
            nn.Linear(proj_dim, pred_hidden),
            nn.BatchNorm1d(pred_hidden),
            nn.ReLU(),
            nn.Linear(pred_hidden, proj_dim),
        )

    def forward(self, x1, x2):
        z1 = self.projector(self.backbone(x1))
        z2 = self.projector(self.backbone(x2))
        return self.predictor(z1), self.predictor(z2), z1, z2


# ---------------------------------------------------------------------------
# text-side stand-ins

_WORD = re.compile(r"[\w/.+-]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.casefold())


def caption_fields(text: str) -> list[str]:
    return [f.strip() for f in text.split(",")]


class Vocab:
    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def encode(self, toks) -> list[int]:
        return [self.stoi.get(t, UNK) for t in toks]

    def __len__(self):
        return len(self.itos)


class _ClipNet(nn.Module):
    def __init__(self, vocab_size: int, width: int = 8, dim: int = 32):
        super().__init__()
        self.backbone = TinyBackbone(3, width)
        self.image_proj = nn.Linear(self.backbone.out_dim, dim)
        self.text_embed = nn.EmbeddingBag(vocab_size, dim, mode="mean")
        self.text_proj = nn.Linear(dim, dim)
        # learnable temperature, stored as log(1/tau) like CLIP
        self.logit_scale = nn.Parameter(torch.tensor(float(np.log(1 / 0.07))))


class TinyClipScorer(Adapter):
    kind = AdapterKind.IMAGE_TEXT_SCORER
    max_vocab = 512

    def __init__(self, width: int = 8, downsample: int = 4, device=None):
        self.vocab = Vocab(["mitotic", "nonmitotic"])
        super().__init__(_ClipNet(self.max_vocab, width), device)
        self.downsample = downsample

    def fit_text(self, bundles):
        for b in bundles:
            for w in words(b.target_text):
                if len(self.vocab) < self.max_vocab:
                    self.vocab.add(w)

    def extra_state(self):
        return {"vocab": self.vocab.itos[len(SPECIALS):]}

    def load_extra_state(self, state):
        self.vocab = Vocab(state.get("vocab", []))

    def _text(self, texts):
        ids = [torch.tensor(self.vocab.encode(words(t)) or [UNK]) for t in texts]
        offsets = torch.tensor([0] + [len(i) for i in ids[:-1]]).cumsum(0)
        m = self.module
        return m.text_proj(m.text_embed(torch.cat(ids).to(self.device), offsets.to(self.device)))

    def _image(self, pixels):
        m = self.module
        return m.image_proj(m.backbone(to_tensor(pixels, self.device, self.downsample)))

    def embed(self, pixels, texts):
        return self._image(pixels), self._text(texts), 1.0 / self.module.logit_scale.exp()

    def similarities(self, pixels, texts):
        with torch.no_grad():
            u = F.normalize(self._image(pixels), dim=1)
            v = F.normalize(self._text(texts), dim=1)
            return (self.module.logit_scale.exp() * u @ v.T).cpu().numpy()


class _GenNet(nn.Module):
    def __init__(self, vocab_size: int, qvocab_size: int, width: int = 8, dim: int = 32, hidden: int = 64):
        super().__init__()
        self.backbone = TinyBackbone(3, width)
        self.q_embed = nn.EmbeddingBag(qvocab_size, dim, mode="mean")
        self.init = nn.Linear(self.backbone.out_dim + dim, hidden)
        self.tok_embed = nn.Embedding(vocab_size, dim, padding_idx=PAD)
        self.gru = nn.GRU(dim, hidden, batch_first=True)
        self.out = nn.Linear(hidden, vocab_size)
        # direct image -> token path so the answer is not bottlenecked by the GRU state
        self.img_out = nn.Linear(self.backbone.out_dim, vocab_size)


class TinyGenerativeAdapter(Adapter):
    """Image(+question)-conditioned GRU decoder over caption *fields*.

    A caption such as ``"mitotic, breast carcinoma, human, XR"`` is tokenised
    into its comma-separated fields, so decoding reproduces the exact string.
    Questions are bags of words.
    """

    generative_scoring = True
    max_vocab = 256
    max_qvocab = 512

    def __init__(self, kind=AdapterKind.VQA_ANSWERER, width: int = 8, downsample: int = 4, max_len: int = 6,
                 device=None):
        self.kind = AdapterKind(kind)
        self.vocab = Vocab(["yes", "no", "mitotic", "nonmitotic"])
        self.qvocab = Vocab()
        super().__init__(_GenNet(self.max_vocab, self.max_qvocab, width), device)
        self.downsample = downsample
        self.max_len = max_len

    def fit_text(self, bundles):
        for b in bundles:
            for f in caption_fields(b.target_text):
                if len(self.vocab) < self.max_vocab:
                    self.vocab.add(f)
            if b.question:
                for w in words(b.question):
                    if len(self.qvocab) < self.max_qvocab:
                        self.qvocab.add(w)

    def extra_state(self):
        return {"vocab": self.vocab.itos[len(SPECIALS):], "qvocab": self.qvocab.itos[len(SPECIALS):]}

    def load_extra_state(self, state):
        self.vocab = Vocab(state.get("vocab", []))
        self.qvocab = Vocab(state.get("qvocab", []))

    def _h0(self, pixels, questions):
        """Initial GRU state and the per-token image bias."""
        m = self.module
        img = m.backbone(to_tensor(pixels, self.device, self.downsample))
        qs = [self.qvocab.encode(words(q)) if q else [] for q in (questions or [None] * len(pixels))]
        ids = [torch.tensor(q or [PAD]) for q in qs]
        offsets = torch.tensor([0] + [len(i) for i in ids[:-1]]).cumsum(0)
        q = m.q_embed(torch.cat(ids).to(self.device), offsets.to(self.device))
        return torch.tanh(m.init(torch.cat([img, q], dim=1))).unsqueeze(0), m.img_out(img)

    def _encode_targets(self, texts):
        seqs = [self.vocab.encode(caption_fields(t)) + [EOS] for t in texts]
        t_max = max(len(s) for s in seqs)
        targets = torch.full((len(seqs), t_max), PAD, dtype=torch.long)
        inputs = torch.full((len(seqs), t_max), PAD, dtype=torch.long)
        for i, s in enumerate(seqs):
            targets[i, : len(s)] = torch.tensor(s)
            inputs[i, : len(s)] = torch.tensor([BOS] + s[:-1])
        lengths = torch.tensor([len(s) for s in seqs])
        return inputs.to(self.device), targets.to(self.device), lengths.to(self.device)

    def _decode_logits(self, state, inputs):
        h0, bias = state
        m = self.module
        out, _ = m.gru(m.tok_embed(inputs), h0)
        return m.out(out) + bias[:, None, :]

    def target_logits(self, pixels, questions, targets):
        inputs, tgt, lengths = self._encode_targets(targets)
        return self._decode_logits(self._h0(pixels, questions), inputs), tgt, lengths

    def candidate_loglik(self, pixels, questions, candidates):
        k = len(candidates[0])
        out = np.zeros((len(pixels), k))
        with torch.no_grad():
            state = self._h0(pixels, questions)
            for j in range(k):
                inputs, tgt, lengths = self._encode_targets([c[j] for c in candidates])
                logits = self._decode_logits(state, inputs)
                lp = torch.log_softmax(logits, -1).gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
                mask = torch.arange(tgt.shape[1], device=tgt.device)[None] < lengths[:, None]
                out[:, j] = (lp * mask).sum(1).double().cpu().numpy()
        return out

    def generate(self, pixels, questions=None):
        m = self.module
        with torch.no_grad():
            h, bias = self._h0(pixels, questions)
            tok = torch.full((len(pixels), 1), BOS, dtype=torch.long, device=self.device)
            fields = [[] for _ in range(len(pixels))]
            done = np.zeros(len(pixels), dtype=bool)
            for _ in range(self.max_len):
                out, h = m.gru(m.tok_embed(tok), h)
                logits = m.out(out[:, -1]) + bias
                logits[:, PAD] = -torch.inf
                logits[:, BOS] = -torch.inf
                nxt = logits.argmax(-1)
                for i, t in enumerate(nxt.tolist()):
                    if done[i]:
                        continue
                    if t == EOS:
                        done[i] = True
                    else:
                        fields[i].append(self.vocab.itos[t] if t < len(self.vocab) else SPECIALS[UNK])
                if done.all():
                    break
                tok = nxt[:, None]
        return [", ".join(f) for f in fields]


class StubVQAAdapter(Adapter):
    """Untrainable VQA answerer.

    With no ``score_fn`` every answer gets the same log-likelihood, which is
    the degenerate zero-shot case (constant score, AUC 0.5). ``score_fn`` maps
    a pixel batch to the log-odds of "yes".
    """

    kind = AdapterKind.VQA_ANSWERER
    trainable = False
    generative_scoring = True

    def __init__(self, score_fn=None, device=None):
        super().__init__(None, device)
        self.score_fn = score_fn

    def candidate_loglik(self, pixels, questions, candidates):
        ll = np.full((len(pixels), len(candidates[0])), np.log(0.5))
        if self.score_fn is not None:
            logodds = np.asarray(self.score_fn(pixels), dtype=np.float64)
            pos = np.array([[c == "yes" for c in cand] for cand in candidates])
            ll = np.where(pos, -np.logaddexp(0, -logodds)[:, None], -np.logaddexp(0, logodds)[:, None])
        return ll

    def generate(self, pixels, questions=None):
        ll = self.candidate_loglik(pixels, questions, [["no", "yes"]] * len(pixels))
        return ["yes" if row[1] > row[0] else "no" for row in ll]


def dark_fraction_logodds(pixels: np.ndarray, threshold: int = 110, pivot: float = 0.05,
                          scale: float = 40.0) -> np.ndarray:
    """Heuristic log-odds from the fraction of dark pixels in the central 96 x 96 window."""
    p = np.asarray(pixels)
    h, w = p.shape[1:3]
    c = p[:, h // 2 - 48 : h // 2 + 48, w // 2 - 48 : w // 2 + 48].mean(axis=3)
    frac = (c < threshold).mean(axis=(1, 2))
    return scale * (frac - pivot)
