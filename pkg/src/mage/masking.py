"""Variable-ratio masking: ratio sampling, mask plans and encoder inputs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import RngStream

MASK_ID = -1  # marker for an [M] slot in an encoder index sequence


@dataclass(frozen=True)
class MaskRatioDist:
    """Gaussian(mode, std) truncated to [min, max]."""

    mode: float = 0.55
    std: float = 0.25
    min: float = 0.5
    max: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.min <= self.mode <= self.max <= 1.0):
            raise ValueError(f"need 0 <= min <= mode <= max <= 1, got {self}")
        if self.std < 0:
            raise ValueError("std must be non-negative")

    def mean(self) -> float:
        """Closed-form mean of the truncated normal."""
        if self.std == 0:
            return self.mode
        a = (self.min - self.mode) / self.std
        b = (self.max - self.mode) / self.std
        pdf = lambda x: math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
        cdf = lambda x: 0.5 * (1 + math.erf(x / math.sqrt(2)))
        return self.mode + self.std * (pdf(a) - pdf(b)) / (cdf(b) - cdf(a))


def sample_ratio(dist: MaskRatioDist, rng: RngStream, size: int | None = None):
    """Rejection-sample masking ratios from ``dist``.

    Returns a float, or an array of ``size`` floats.
    """
    n = 1 if size is None else size
    if dist.std == 0:
        out = np.full(n, dist.mode)
    else:
        gen = rng.numpy()
        out = np.empty(0)
        while out.size < n:
            draw = gen.normal(dist.mode, dist.std, size=max(16, 2 * (n - out.size)))
            draw = draw[(draw >= dist.min) & (draw <= dist.max)]
            out = np.concatenate([out, draw])
        out = out[:n]
    return float(out[0]) if size is None else out


@dataclass
class MaskPlan:
    """Masked / dropped index sets for one sequence of length ``seq_len``."""

    seq_len: int
    ratio: float
    masked: np.ndarray  # bool [seq_len]
    dropped: np.ndarray  # bool [seq_len]
    kept_order: np.ndarray = field(init=False)  # ascending original indices

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool)
        self.dropped = np.asarray(self.dropped, dtype=bool)
        if self.masked.shape != (self.seq_len,) or self.dropped.shape != (self.seq_len,):
            raise ValueError("mask arrays must have length seq_len")
        if (self.dropped & ~self.masked).any():
            raise ValueError("dropped positions must be masked")
        self.kept_order = np.flatnonzero(~self.dropped)

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def num_dropped(self) -> int:
        return int(self.dropped.sum())

    @classmethod
    def from_indices(cls, seq_len, masked=(), dropped=(), ratio=None):
        m = np.zeros(seq_len, bool)
        d = np.zeros(seq_len, bool)
        m[list(masked)] = True
        d[list(dropped)] = True
        return cls(seq_len, len(masked) / seq_len if ratio is None else ratio, m, d)


def mask_count(l: int, ratio: float) -> int:
    # the epsilon keeps e.g. 0.55 * 20 = 11.000000000000002 from rounding up
    return min(l, math.ceil(ratio * l - 1e-9))


def drop_count(l: int) -> int:
    return l // 2


def build_mask_plan(l: int, ratio: float, rng: RngStream) -> MaskPlan:
    """Mask ``ceil(ratio * l)`` positions and drop ``floor(l / 2)`` of them."""
    if l < 2:
        raise ValueError("sequence length must be at least 2")
    if not 0.5 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must be in [0.5, 1], got {ratio}")
    gen = rng.numpy()
    order = gen.permutation(l)
    masked_idx = order[: mask_count(l, ratio)]
    dropped_idx = gen.permutation(masked_idx)[: drop_count(l)]
    masked = np.zeros(l, bool)
    dropped = np.zeros(l, bool)
    masked[masked_idx] = True
    dropped[dropped_idx] = True
    return MaskPlan(l, ratio, masked, dropped)


def zero_plan(l: int) -> MaskPlan:
    """Evaluation plan: nothing masked, nothing dropped."""
    return MaskPlan(l, 0.0, np.zeros(l, bool), np.zeros(l, bool))


def visible_plan(mask: np.ndarray) -> MaskPlan:
    """Plan that masks ``mask`` but drops nothing (iterative decoding)."""
    mask = np.asarray(mask, bool)
    return MaskPlan(mask.size, float(mask.mean()), mask, np.zeros(mask.size, bool))


@dataclass
class PlanBatch:
    """Stacked plans; all members share ``seq_len`` and drop count."""

    masked: torch.Tensor  # bool [B, N]
    dropped: torch.Tensor  # bool [B, N]
    kept: torch.Tensor  # long [B, L]
    ratios: torch.Tensor  # float [B]

    @classmethod
    def stack(cls, plans) -> "PlanBatch":
        lens = {p.kept_order.size for p in plans}
        if len(lens) != 1 or len({p.seq_len for p in plans}) != 1:
            raise ValueError("plans in a batch must share length and drop count")
        return cls(
            masked=torch.from_numpy(np.stack([p.masked for p in plans])),
            dropped=torch.from_numpy(np.stack([p.dropped for p in plans])),
            kept=torch.from_numpy(np.stack([p.kept_order for p in plans]).astype(np.int64)),
            ratios=torch.tensor([p.ratio for p in plans], dtype=torch.float32),
        )

    @property
    def seq_len(self) -> int:
        return self.masked.shape[1]

    def __len__(self):
        return self.masked.shape[0]


@dataclass
class EncoderInput:
    """Shortened encoder sequence: token ids (``MASK_ID`` for [M]) and the
    original position of every slot. ``features`` replaces ``tokens`` when
    the quantizer is bypassed."""

    tokens: torch.Tensor | None  # long [B, L]
    positions: torch.Tensor  # long [B, L]
    is_mask: torch.Tensor  # bool [B, L]
    features: torch.Tensor | None = None  # float [B, L, d]


def apply_mask(tokens: torch.Tensor, plan) -> EncoderInput:
    """Drop the plan's dropped positions and mark masked-kept ones as [M].

    ``tokens`` is ``[N]`` with a :class:`MaskPlan`, or ``[B, N]`` with a
    :class:`PlanBatch`. A float ``[B, N, d]`` tensor is treated as
    continuous features (quantizer bypass).
    """
    if isinstance(plan, MaskPlan):
        plan = PlanBatch.stack([plan])
        tokens = tokens.unsqueeze(0)
    continuous = tokens.is_floating_point()
    if tokens.shape[:2] != plan.masked.shape:
        raise ValueError(f"plan covers {tuple(plan.masked.shape)}, sequence is {tuple(tokens.shape[:2])}")
    pos = plan.kept
    is_mask = plan.masked.gather(1, pos)
    if continuous:
        feats = tokens.gather(1, pos[..., None].expand(-1, -1, tokens.shape[-1]))
        return EncoderInput(None, pos, is_mask, feats)
    toks = tokens.long().gather(1, pos).masked_fill(is_mask, MASK_ID)
    return EncoderInput(toks, pos, is_mask)
