"""Differentiable torch versions of :mod:`mitovl.objectives` for training loops."""

import torch
import torch.nn.functional as F


def clip_symmetric_infonce(u: torch.Tensor, v: torch.Tensor, temperature) -> torch.Tensor:
    if u.shape[0] < 2:
        raise ValueError("contrastive loss needs N >= 2")
    if (u.norm(dim=1) == 0).any() or (v.norm(dim=1) == 0).any():
        raise ValueError("zero-norm embedding row; cosine similarity is undefined")
    logits = F.normalize(u, dim=1) @ F.normalize(v, dim=1).T / temperature
    target = torch.arange(u.shape[0], device=u.device)
    # mean over rows of each direction == (1/2N) * (sum + sum)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def autoregressive_nll(
    logits: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor, reduction: str = "sum"
) -> torch.Tensor:
    """Summed (or per-token mean) NLL of ``targets`` under ``logits`` of shape ``(N, T, V)``."""
    lp = torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = torch.arange(targets.shape[1], device=targets.device)[None, :] < lengths[:, None]
    total = -(lp * mask).sum()
    if reduction == "sum":
        return total
    if reduction == "mean_token":
        return total / mask.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return -(F.normalize(p, dim=1) * F.normalize(z.detach(), dim=1)).sum(dim=1).mean()


def simsiam_loss(p1, p2, z1, z2) -> torch.Tensor:
    return 0.5 * negative_cosine(p1, z2) + 0.5 * negative_cosine(p2, z1)
