"""Iterative parallel decoding: generation, inpainting, outpainting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

from .masking import PlanBatch
from .model import MageModel, forward_train
from .numerics import RngStream


@dataclass(frozen=True)
class DecodeSchedule:
    steps: int = 20
    gumbel_temperature: float = 6.0
    sample_temperature: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one decoding step")
        if self.gumbel_temperature < 0 or self.sample_temperature <= 0:
            raise ValueError("temperatures must be non-negative (sampling: positive)")


@dataclass
class DecodeState:
    tokens: torch.Tensor  # long [B, N]; -1 where masked
    mask: torch.Tensor  # bool [B, N]
    confidences: torch.Tensor  # float [B, N]; +inf at committed positions
    counts: list[int]  # masked count after each step, counts[0] = N0
    t: int = 0

    @property
    def num_masked(self) -> int:
        return int(self.mask[0].sum())


def cosine_schedule(n0: int, steps: int) -> list[int]:
    """Masked counts ``[N0, ..., 0]`` (``steps + 1`` entries).

    Entry ``t`` is ``floor(N0 * cos(pi t / 2T))``, lowered where needed so
    that the sequence strictly decreases until it hits zero.
    """
    if n0 < 1 or steps < 1:
        raise ValueError("need n0 >= 1 and steps >= 1")
    counts = [n0]
    for t in range(1, steps + 1):
        raw = 0 if t == steps else math.floor(n0 * math.cos(math.pi * t / (2 * steps)))
        counts.append(max(0, min(raw, counts[-1] - 1)))
    return counts


def gumbel_noise(u: torch.Tensor | float) -> torch.Tensor:
    u = torch.as_tensor(u, dtype=torch.float64)
    return -torch.log(-torch.log(u))


def gumbel_confidence(log_prob, tau: float, rng: RngStream | None = None, u=None) -> torch.Tensor:
    """``log_prob + tau * g`` with ``g = -ln(-ln u)``, ``u ~ U(0, 1)``."""
    log_prob = torch.as_tensor(log_prob)
    if tau == 0:
        return log_prob.clone()
    if u is None:
        u = torch.rand(log_prob.shape, generator=rng.torch(), dtype=torch.float64)
        u = u.clamp(1e-20, 1 - 1e-16)
    return log_prob + tau * gumbel_noise(u).to(log_prob.dtype)


def init_state(tokens: torch.Tensor, region: torch.Tensor, steps: int) -> DecodeState:
    region = region.bool()
    n0 = {int(r.sum()) for r in region}
    if len(n0) != 1:
        raise ValueError("all rows of a batch must mask the same number of tokens")
    n0 = n0.pop()
    toks = tokens.clone().long().masked_fill(region, -1)
    conf = torch.full(region.shape, math.inf).masked_fill(region, -math.inf)
    return DecodeState(toks, region.clone(), conf, cosine_schedule(n0, steps) if n0 else [0])


@torch.no_grad()
def decode_step(state: DecodeState, model: MageModel, schedule: DecodeSchedule,
                rng: RngStream, labels=None) -> DecodeState:
    """Predict masked tokens, sample them, re-mask the least confident."""
    if state.t >= len(state.counts) - 1:
        raise ValueError("decoding already finished")
    b, n = state.mask.shape
    if n != model.cfg.seq_len:
        raise ValueError("state length does not match the model")
    plan = PlanBatch(masked=state.mask, dropped=torch.zeros_like(state.mask),
                     kept=torch.arange(n).expand(b, n).contiguous(),
                     ratios=state.mask.float().mean(1))
    logits = forward_train(state.tokens.clamp(min=0), plan, model, labels=labels)
    logp = torch.log_softmax(logits / schedule.sample_temperature, dim=-1)
    sampled = torch.multinomial(logp.exp().reshape(b * n, -1), 1,
                                generator=rng.split("sample").torch()).view(b, n)
    chosen = logp.gather(-1, sampled[..., None]).squeeze(-1)
    conf = gumbel_confidence(chosen.double(), schedule.gumbel_temperature, rng.split("gumbel"))
    conf = torch.where(state.mask, conf, torch.full_like(conf, math.inf))
    keep_masked = state.counts[state.t + 1]
    order = torch.sort(conf, dim=1, stable=True).indices[:, :keep_masked]
    new_mask = torch.zeros_like(state.mask).scatter(1, order, True)
    toks = torch.where(state.mask, sampled, state.tokens).masked_fill(new_mask, -1)
    return replace(state, tokens=toks, mask=new_mask, confidences=conf.float(), t=state.t + 1)


@torch.no_grad()
def run_decoding(state: DecodeState, model: MageModel, schedule: DecodeSchedule,
                 rng: RngStream, labels=None, trace: list | None = None) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        while state.t < len(state.counts) - 1:
            state = decode_step(state, model, schedule, rng.split(state.t), labels)
            if trace is not None:
                trace.append(state)
    finally:
        model.train(was_training)
    return state.tokens


def _grid(tokens: torch.Tensor) -> torch.Tensor:
    side = math.isqrt(tokens.shape[1])
    return tokens.view(-1, side, side) if side * side == tokens.shape[1] else tokens


def generate(model: MageModel, schedule: DecodeSchedule, rng: RngStream, count: int = 1,
             labels=None, trace: list | None = None) -> torch.Tensor:
    """Sample ``count`` token grids starting from an all-masked canvas."""
    n = model.cfg.seq_len
    if labels is not None:
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1).expand(count)
    state = init_state(torch.zeros(count, n, dtype=torch.long), torch.ones(count, n, dtype=torch.bool),
                       schedule.steps)
    return _grid(run_decoding(state, model, schedule, rng, labels, trace))


def inpaint(tokens: torch.Tensor, region: torch.Tensor, model: MageModel, schedule: DecodeSchedule,
            rng: RngStream, labels=None, trace: list | None = None) -> torch.Tensor:
    """Regenerate the tokens under ``region``; everything else is kept.

    ``tokens`` / ``region`` are ``[h, w]`` or ``[B, h, w]`` grids.
    """
    single = tokens.ndim == 2
    toks = tokens.reshape(1 if single else tokens.shape[0], -1)
    reg = region.reshape(toks.shape).bool()
    if not reg.any():
        return tokens.clone()
    state = init_state(toks, reg, schedule.steps)
    out = run_decoding(state, model, schedule, rng, labels, trace).view(tokens.shape)
    return out
