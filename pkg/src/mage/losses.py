"""Reconstruction, InfoNCE and combined objectives."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import softmax_cross_entropy


@dataclass
class ContrastiveConfig:
    temperature: float = 0.2
    weight: float = 0.1
    max_ratio: float = 0.6  # views with m_r >= this skip the contrastive term

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.weight < 0:
            raise ValueError("loss weight must be non-negative")


def reconstructive_loss(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor,
                        smoothing: float = 0.0) -> torch.Tensor:
    """Mean (smoothed) cross-entropy over masked positions only.

    ``logits [B, N, K]`` (or ``[N, K]``), ``targets [B, N]``, ``masked``
    boolean ``[B, N]``. Dropped positions count as masked.
    """
    if logits.ndim == 2:
        logits, targets, masked = logits[None], targets[None], masked[None]
    masked = torch.as_tensor(masked, dtype=torch.bool)
    if logits.shape[:2] != targets.shape or masked.shape != targets.shape:
        raise ValueError("logits, targets and mask shapes disagree")
    if not masked.any():
        raise ValueError("plan masks no positions")
    return softmax_cross_entropy(logits[masked], targets[masked], smoothing)


def contrastive_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.2,
                     tol: float = 1e-4) -> torch.Tensor:
    """Symmetrised InfoNCE between row-normalised views ``[B, d]``.

    Row ``i`` of one view is scored against all ``B`` rows of the other
    view (its positive included); both directions are averaged.
    """
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError("views must both be [B, d]")
    b = z1.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    for z in (z1, z2):
        if (z.detach().norm(dim=1) - 1).abs().max() > tol:
            raise ValueError("embeddings must be L2-normalised")
    sim = z1 @ z2.T / temperature
    target = torch.arange(b)
    return 0.5 * (softmax_cross_entropy(sim, target) + softmax_cross_entropy(sim.T, target))


def combined_loss(recon: torch.Tensor, z1: torch.Tensor | None, z2: torch.Tensor | None,
                  ratios1: torch.Tensor | None, ratios2: torch.Tensor | None,
                  cfg: ContrastiveConfig):
    """``recon + weight * contrast``; contrast uses only batch rows whose
    two views both have ``m_r < cfg.max_ratio`` and is zero for fewer than
    two such rows. Returns ``(total, contrast)``."""
    zero = recon.new_zeros(())
    if cfg.weight == 0 or z1 is None:
        return recon, zero
    keep = (torch.as_tensor(ratios1) < cfg.max_ratio) & (torch.as_tensor(ratios2) < cfg.max_ratio)
    if int(keep.sum()) < 2:
        return recon, zero
    contrast = contrastive_loss(z1[keep], z2[keep], cfg.temperature)
    return recon + cfg.weight * contrast, contrast
