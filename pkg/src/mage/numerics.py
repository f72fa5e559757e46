"""Numeric substrate: counter-based RNG streams, smoothed cross-entropy,
AdamW with global-norm clipping, learning-rate schedule and gradient checks.

Tensors and autograd come from torch (float32 throughout training).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float32


class NumericError(ArithmeticError):
    """Raised when a loss, gradient or activation stops being finite."""


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


@dataclass
class RngStream:
    """Replayable random stream keyed by ``(seed, counter)``.

    Every draw takes a fresh Philox block ``[0, counter, 0, 0]`` so a single
    call can consume up to 2**64 blocks without touching the next call's.
    Child streams come from :meth:`split` with a string key.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) % (1 << 64)

    def numpy(self) -> np.random.Generator:
        bg = np.random.Philox(key=self.seed, counter=[0, self.counter, 0, 0])
        self.counter += 1
        return np.random.Generator(bg)

    def torch(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.numpy().integers(0, 1 << 63)))
        return g

    def split(self, key: str | int) -> "RngStream":
        h = hashlib.blake2b(f"{self.seed}/{key}".encode(), digest_size=8)
        return RngStream(int.from_bytes(h.digest(), "little"))

    def uniform(self, size=None) -> np.ndarray | float:
        return self.numpy().random(size)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                          smoothing: float = 0.0, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy against ``(1 - s) * onehot + s / K``.

    ``logits`` is ``[n, K]``; gradients come from autograd and each row of
    ``dL/dlogits`` sums to zero.
    """
    if logits.ndim != 2:
        raise ValueError(f"expected [n, K] logits, got {tuple(logits.shape)}")
    n, k = logits.shape
    if k < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    check_finite(logits, "logits")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != (n,):
        raise ValueError("targets must have one entry per logit row")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise IndexError("target index out of range")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(1, targets[:, None]).squeeze(1)
    if smoothing:
        nll = (1.0 - smoothing) * nll - smoothing * logp.mean(dim=-1)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    return nll.mean()


# ---------------------------------------------------------------------------
# optimisation


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch / 256``."""
    return base_lr * batch_size / 256


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_steps: int = 0,
              min_lr: float = 0.0) -> float:
    if warmup_steps and step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Iterable[torch.Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(p.grad.double().pow(2).sum())
    return math.sqrt(sq)


class AdamW:
    """Decoupled-weight-decay Adam with global gradient-norm clipping.

    Wraps :class:`torch.optim.AdamW`. Parameters with fewer than two
    dimensions (biases, norms) and any name listed in ``no_decay`` skip
    weight decay. Each :meth:`step` takes the learning rate to apply.
    """

    def __init__(self, named_params, lr: float = 1.5e-4, betas=(0.9, 0.95),
                 weight_decay: float = 0.05, clip_norm: float | None = 3.0,
                 eps: float = 1e-8, no_decay: Sequence[str] = (), lr_scales=None):
        named = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.clip_norm = clip_norm
        lr_scales = lr_scales or {}
        groups: dict[tuple, dict] = {}
        for n, p in named:
            wd = 0.0 if (p.ndim < 2 or any(s in n for s in no_decay)) else weight_decay
            scale = lr_scales.get(n, 1.0)
            g = groups.setdefault((wd, scale), {"params": [], "weight_decay": wd, "lr_scale": scale})
            g["params"].append(p)
        self.opt = torch.optim.AdamW(list(groups.values()), lr=lr, betas=betas, eps=eps,
                                     weight_decay=weight_decay, foreach=False)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> float:
        """Clip, then update. Returns the pre-clip global gradient norm.

        A non-finite gradient aborts the step with :class:`NumericError`
        and leaves parameters and moments untouched.
        """
        norm = global_grad_norm(self.params)
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient; step aborted")
        if self.clip_norm is not None and norm > self.clip_norm:
            coef = self.clip_norm / (norm + 1e-6)
            for p in self.params:
                if p.grad is not None:
                    p.grad.mul_(coef)
        for g in self.opt.param_groups:
            g["lr"] = lr * g["lr_scale"]
        self.opt.step()
        self.step_count += 1
        return norm

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, p in zip(self.names, self.params):
            st = self.opt.state.get(p)
            if st:
                out[f"{n}.exp_avg"] = st["exp_avg"]
                out[f"{n}.exp_avg_sq"] = st["exp_avg_sq"]
                out[f"{n}.step"] = st["step"].reshape(1).to(DTYPE)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int):
        for n, p in zip(self.names, self.params):
            if f"{n}.exp_avg" not in tensors:
                continue
            m, v = tensors[f"{n}.exp_avg"], tensors[f"{n}.exp_avg_sq"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"optimizer moment shape mismatch for {n}")
            self.opt.state[p] = {
                "step": tensors[f"{n}.step"].reshape(()).clone(),
                "exp_avg": m.clone(),
                "exp_avg_sq": v.clone(),
            }
        self.step_count = step_count


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = 1e-3, n_samples: int | None = 64, rng: RngStream | None = None,
               dtype=torch.float64, atol: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    ``fn`` maps ``inputs`` to a scalar. Up to ``n_samples`` coordinates per
    input are probed (all of them when ``None``). The error per coordinate is
    ``|a - n| / (|a| + |n| + atol)``; ``atol`` keeps exactly-zero gradients
    (e.g. attention key biases) from turning round-off into large ratios.
    """
    rng = rng or RngStream(0)
    xs = [x.detach().to(dtype).clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, ga in zip(xs, analytic):
            ga = torch.zeros_like(x) if ga is None else ga
            flat, gflat = x.view(-1), ga.reshape(-1)
            coords = np.arange(flat.numel())
            if n_samples is not None and flat.numel() > n_samples:
                coords = rng.numpy().choice(flat.numel(), n_samples, replace=False)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                hi = float(fn(*xs))
                flat[c] = orig - eps
                lo = float(fn(*xs))
                flat[c] = orig
                num = (hi - lo) / (2 * eps)
                a = float(gflat[c])
                worst = max(worst, abs(a - num) / (abs(a) + abs(num) + atol))
    return worst
