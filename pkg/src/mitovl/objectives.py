"""Training objectives and pretext transforms, in numpy with analytic gradients.

The torch twins used inside training loops live in
:mod:`mitovl.models.torch_losses` and are tested against these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingBatch:
    image_embeddings: np.ndarray  # (N, D)
    text_embeddings: np.ndarray  # (N, D)
    temperature: float = 1.0


@dataclass(frozen=True)
class TokenBatch:
    """Log-probabilities of the realised target tokens, right-padded to ``(N, T_max)``."""

    token_log_probs: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_ragged(cls, seqs) -> "TokenBatch":
        seqs = [np.asarray(s, dtype=np.float64) for s in seqs]
        t_max = max((len(s) for s in seqs), default=0)
        lp = np.zeros((len(seqs), t_max))
        for i, s in enumerate(seqs):
            lp[i, : len(s)] = s
        return cls(lp, np.array([len(s) for s in seqs], dtype=np.int64))


@dataclass(frozen=True)
class SiameseBatch:
    p1: np.ndarray
    p2: np.ndarray
    z1: np.ndarray
    z2: np.ndarray


def _unit_rows(x: np.ndarray, name: str):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ObjectiveError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ObjectiveError(f"{name} has non-finite entries")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ObjectiveError(f"{name} has a zero-norm row; cosine similarity is undefined")
    return x / norms[:, None], norms


def _log_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def _infonce_parts(b: EmbeddingBatch):
    if not b.temperature > 0:
        raise ObjectiveError(f"temperature must be positive, got {b.temperature}")
    u, nu = _unit_rows(b.image_embeddings, "image_embeddings")
    v, nv = _unit_rows(b.text_embeddings, "text_embeddings")
    if u.shape != v.shape:
        raise ObjectiveError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    if u.shape[0] < 2:
        raise ObjectiveError("contrastive loss needs N >= 2")
    logits = u @ v.T / b.temperature
    return u, nu, v, nv, logits


def clip_symmetric_infonce(b: EmbeddingBatch) -> float:
    """Symmetric cross-entropy over temperature-scaled cosine similarities."""
    *_, logits = _infonce_parts(b)
    n = logits.shape[0]
    i2t = np.trace(_log_softmax(logits, axis=1))
    t2i = np.trace(_log_softmax(logits, axis=0))
    return float(-(i2t + t2i) / (2 * n))


def clip_symmetric_infonce_grad(b: EmbeddingBatch):
    """Loss and gradients w.r.t. the raw image embeddings, text embeddings and temperature."""
    u, nu, v, nv, logits = _infonce_parts(b)
    n = logits.shape[0]
    row = _log_softmax(logits, axis=1)
    col = _log_softmax(logits, axis=0)
    loss = -(np.trace(row) + np.trace(col)) / (2 * n)
    eye = np.eye(n)
    g_logits = ((np.exp(row) - eye) + (np.exp(col) - eye)) / (2 * n)
    tau = b.temperature
    g_u_hat = g_logits @ v / tau
    g_v_hat = g_logits.T @ u / tau
    # back through row normalisation: (I - x x^T) g / |x|
    g_u = (g_u_hat - u * np.sum(u * g_u_hat, axis=1, keepdims=True)) / nu[:, None]
    g_v = (g_v_hat - v * np.sum(v * g_v_hat, axis=1, keepdims=True)) / nv[:, None]
    g_tau = -float(np.sum(g_logits * logits)) / tau
    return float(loss), g_u, g_v, g_tau


def _check_tokens(b: TokenBatch):
    lp = np.asarray(b.token_log_probs, dtype=np.float64)
    lengths = np.asarray(b.lengths, dtype=np.int64)
    if lp.ndim != 2 or lengths.shape != (lp.shape[0],):
        raise ObjectiveError("token_log_probs must be (N, T) with one length per row")
    if np.any(lengths < 1) or np.any(lengths > lp.shape[1]):
        raise ObjectiveError("lengths must be in [1, T_max]")
    mask = np.arange(lp.shape[1])[None, :] < lengths[:, None]
    if np.any(lp[mask] > 0):
        raise ObjectiveError("log-probabilities must be <= 0")
    return lp, lengths, mask


def autoregressive_nll(b: TokenBatch, reduction: str = "sum") -> float:
    """Negative log-likelihood of the realised tokens, padding excluded.

    ``reduction="sum"`` is the canonical total; ``"mean_token"`` divides by the
    number of real tokens.
    """
    lp, lengths, mask = _check_tokens(b)
    total = -float(lp[mask].sum())
    if reduction == "sum":
        return total
    if reduction == "mean_token":
        return total / int(lengths.sum())
    raise ObjectiveError(f"unknown reduction {reduction!r}")


def token_log_probs(logits: np.ndarray, targets: np.ndarray, lengths) -> TokenBatch:
    """Gather ``log softmax(logits)[target]`` per step; logits are ``(N, T, V)``."""
    logits = np.asarray(logits, dtype=np.float64)
    lsm = _log_softmax(logits, axis=2)
    picked = np.take_along_axis(lsm, np.asarray(targets)[..., None], axis=2)[..., 0]
    lengths = np.asarray(lengths, dtype=np.int64)
    mask = np.arange(picked.shape[1])[None, :] < lengths[:, None]
    return TokenBatch(np.where(mask, picked, 0.0), lengths)


def autoregressive_nll_grad(logits: np.ndarray, targets: np.ndarray, lengths):
    """Summed NLL from raw logits and its gradient ``softmax - onehot`` on real steps."""
    logits = np.asarray(logits, dtype=np.float64)
    batch = token_log_probs(logits, targets, lengths)
    loss = autoregressive_nll(batch)
    probs = np.exp(_log_softmax(logits, axis=2))
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, np.asarray(targets)[..., None], 1.0, axis=2)
    mask = np.arange(logits.shape[1])[None, :] < batch.lengths[:, None]
    return loss, (probs - onehot) * mask[..., None]


def _neg_cos_mean(p, z):
    ph, pn = _unit_rows(p, "predictions")
    zh, _ = _unit_rows(z, "projections")
    return -float(np.mean(np.sum(ph * zh, axis=1))), ph, pn, zh


def simsiam_loss(b: SiameseBatch) -> float:
    """``0.5 * D(p1, sg(z2)) + 0.5 * D(p2, sg(z1))`` with ``D`` the mean negative cosine."""
    d12, *_ = _neg_cos_mean(b.p1, b.z2)
    d21, *_ = _neg_cos_mean(b.p2, b.z1)
    return 0.5 * d12 + 0.5 * d21


def simsiam_loss_grad(b: SiameseBatch):
    """Loss and gradients ``(g_p1, g_p2, g_z1, g_z2)``; the z gradients are zero by the stop-gradient."""
    n = np.asarray(b.p1).shape[0]
    d12, p1h, p1n, z2h = _neg_cos_mean(b.p1, b.z2)
    d21, p2h, p2n, z1h = _neg_cos_mean(b.p2, b.z1)

    def g(ph, pn, zh):
        # d/dp of -0.5 * mean cos(p, z)
        return -0.5 / n * (zh - ph * np.sum(ph * zh, axis=1, keepdims=True)) / pn[:, None]

    zero = np.zeros_like(np.asarray(b.z1, dtype=np.float64))
    return 0.5 * d12 + 0.5 * d21, g(p1h, p1n, z2h), g(p2h, p2n, z1h), zero, zero.copy()


# ---------------------------------------------------------------------------
# H&E colour deconvolution

RUIFROK_H = (0.650, 0.704, 0.286)
RUIFROK_E = (0.072, 0.990, 0.105)


def stain_matrix(h=RUIFROK_H, e=RUIFROK_E) -> np.ndarray:
    """Rows: unit H, unit E, and their normalised cross product as the residual channel."""
    h = np.asarray(h, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    h = h / np.linalg.norm(h)
    e = e / np.linalg.norm(e)
    r = np.cross(h, e)
    return np.stack([h, e, r / np.linalg.norm(r)])


def optical_density(rgb: np.ndarray) -> np.ndarray:
    return -np.log10((np.asarray(rgb, dtype=np.float64) + 1.0) / 256.0)


def stain_separate(rgb_tile: np.ndarray, matrix: np.ndarray | None = None):
    """Return non-negative ``(H, E)`` concentration maps of an 8-bit RGB tile."""
    rgb_tile = np.asarray(rgb_tile)
    if rgb_tile.ndim != 3 or rgb_tile.shape[2] != 3:
        raise ObjectiveError(f"expected an H x W x 3 RGB tile, got shape {rgb_tile.shape}")
    if rgb_tile.dtype != np.uint8:
        raise ObjectiveError(f"expected 8-bit RGB, got dtype {rgb_tile.dtype}")
    m = stain_matrix() if matrix is None else np.asarray(matrix, dtype=np.float64)
    od = optical_density(rgb_tile)
    conc = od.reshape(-1, 3) @ np.linalg.inv(m)
    conc = np.clip(conc, 0.0, None).reshape(rgb_tile.shape)
    return conc[..., 0], conc[..., 1]


def stain_pretext_pair(rgb_tile: np.ndarray, matrix: np.ndarray | None = None):
    """``(input, target) = (E, H)`` for the H-from-E regression pretext."""
    h, e = stain_separate(rgb_tile, matrix)
    return e, h


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
