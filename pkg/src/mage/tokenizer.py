"""Convolutional VQ tokenizer / detokenizer."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import RngStream, check_finite


@dataclass
class VqConfig:
    num_blocks: int = 2
    res_blocks: int = 2
    channels: int = 16  # doubled after every block
    codebook_size: int = 64
    dim: int = 16
    beta: float = 0.25
    padding: str = "zeros"  # border handling of the 3x3 convolutions: "zeros" or "replicate"

    def __post_init__(self):
        if self.padding not in ("replicate", "zeros"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least two entries")

    @property
    def downsample(self) -> int:
        return 2 ** self.num_blocks

    def to_dict(self):
        return asdict(self)


class Quantized(NamedTuple):
    indices: torch.Tensor  # long [..., h, w]
    quantized: torch.Tensor  # straight-through output, same shape as features
    vq_loss: torch.Tensor
    commit_loss: torch.Tensor


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int, rng: RngStream | None = None):
        super().__init__()
        rng = rng or RngStream(0)
        self.entries = nn.Parameter(
            (torch.rand(size, dim, generator=rng.torch()) * 2 - 1) / size)
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.int64))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def nearest(flat: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest entry per row; ties go to the lowest index."""
    out = torch.empty(flat.shape[0], dtype=torch.long)
    for s in range(0, flat.shape[0], 4096):
        chunk = flat[s:s + 4096]
        d = (chunk[:, None, :] - entries[None, :, :]).pow(2).sum(-1)
        out[s:s + 4096] = d.argmin(dim=1)
    return out


def quantize(features: torch.Tensor, codebook: Codebook, count: bool = True) -> Quantized:
    """Nearest-neighbour quantization of channel-last ``features [..., d]``.

    The returned ``quantized`` carries a straight-through gradient to
    ``features``. Losses are per-pixel squared distances averaged over
    pixels: ``vq_loss`` moves entries, ``commit_loss`` moves features.
    """
    if features.shape[-1] != codebook.dim:
        raise ValueError(f"feature dim {features.shape[-1]} != codebook dim {codebook.dim}")
    flat = features.reshape(-1, codebook.dim)
    with torch.no_grad():
        idx = nearest(flat.detach(), codebook.entries.detach())
    if count:
        codebook.usage_counts += torch.bincount(idx, minlength=codebook.size)
    q = codebook.entries[idx]
    vq_loss = (flat.detach() - q).pow(2).sum(-1).mean()
    commit_loss = (flat - q.detach()).pow(2).sum(-1).mean()
    st = flat + (q - flat).detach()
    return Quantized(idx.view(features.shape[:-1]), st.view(features.shape), vq_loss, commit_loss)


def conv3(cin: int, cout: int, padding: str) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode=padding)


class ResBlock(nn.Module):
    def __init__(self, ch: int, padding: str = "zeros"):
        super().__init__()
        groups = 8 if ch % 8 == 0 else 1
        self.body = nn.Sequential(
            nn.GroupNorm(groups, ch), nn.SiLU(), conv3(ch, ch, padding),
            nn.GroupNorm(groups, ch), nn.SiLU(), conv3(ch, ch, padding),
        )

    def forward(self, x):
        return x + self.body(x)


class VqEncoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        ch = cfg.channels
        layers: list[nn.Module] = [conv3(3, ch, cfg.padding)]
        for b in range(cfg.num_blocks):
            out = cfg.channels * 2 ** b
            if out != ch:
                layers.append(nn.Conv2d(ch, out, 1))
                ch = out
            layers += [ResBlock(ch, cfg.padding) for _ in range(cfg.res_blocks)]
            layers.append(nn.AvgPool2d(2))
        layers += [nn.GroupNorm(8 if ch % 8 == 0 else 1, ch), nn.SiLU(), nn.Conv2d(ch, cfg.dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class VqDecoder(nn.Module):
    def __init__(self, cfg: VqConfig):
        super().__init__()
        ch = cfg.channels * 2 ** (cfg.num_blocks - 1)
        layers: list[nn.Module] = [conv3(cfg.dim, ch, cfg.padding)]
        for b in reversed(range(cfg.num_blocks)):
            out = cfg.channels * 2 ** b
            if out != ch:
                layers.append(nn.Conv2d(ch, out, 1))
                ch = out
            layers += [ResBlock(ch, cfg.padding) for _ in range(cfg.res_blocks)]
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
        layers += [nn.GroupNorm(8 if ch % 8 == 0 else 1, ch), nn.SiLU(), conv3(ch, 3, cfg.padding)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class VqTokenizer(nn.Module):
    """Encoder, codebook and decoder. Images are ``[B, 3, H, W]`` in [-1, 1];
    token grids are ``[B, H / 2**b, W / 2**b]`` long tensors."""

    def __init__(self, cfg: VqConfig | None = None, rng: RngStream | None = None):
        super().__init__()
        self.cfg = cfg = cfg or VqConfig()
        rng = rng or RngStream(0)
        gen = rng.split("init").torch()
        self.encoder = VqEncoder(cfg)
        self.decoder = VqDecoder(cfg)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=5 ** 0.5, generator=gen)
                nn.init.zeros_(m.bias)
        self.codebook = Codebook(cfg.codebook_size, cfg.dim, rng.split("codebook"))

    def _check(self, images):
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        s = self.cfg.downsample
        if images.shape[2] % s or images.shape[3] % s:
            raise ValueError(f"image sides must be divisible by {s}")
        return images

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Unquantized channel-last encoder features ``[B, h, w, d]``."""
        return self.encoder(self._check(images)).permute(0, 2, 3, 1)

    def forward(self, images: torch.Tensor, count: bool = True):
        feats = self.features(images)
        q = quantize(feats, self.codebook, count=count)
        recon = self.decoder(q.quantized.permute(0, 3, 1, 2))
        return recon, q, feats

    def embed_indices(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.min() < 0 or grid.max() >= self.codebook.size:
            raise IndexError("token index out of codebook range")
        return self.codebook.entries[grid].permute(0, 3, 1, 2)


@torch.no_grad()
def encode_image(images: torch.Tensor, tokenizer: VqTokenizer) -> torch.Tensor:
    """Images -> token grids. Accepts a single ``[3, H, W]`` image or a batch."""
    single = images.ndim == 3
    feats = tokenizer.features(images)
    idx = nearest(feats.reshape(-1, tokenizer.codebook.dim), tokenizer.codebook.entries)
    grid = idx.view(feats.shape[:-1])
    return grid[0] if single else grid


@torch.no_grad()
def decode_tokens(grid: torch.Tensor, tokenizer: VqTokenizer) -> torch.Tensor:
    single = grid.ndim == 2
    if single:
        grid = grid.unsqueeze(0)
    img = tokenizer.decoder(tokenizer.embed_indices(grid)).clamp(-1.0, 1.0)
    return img[0] if single else img


def tokenizer_loss(images: torch.Tensor, tok: VqTokenizer):
    recon, q, feats = tok(images)
    rec = (recon - images).pow(2).mean()
    total = rec + q.vq_loss + tok.cfg.beta * q.commit_loss
    return total, {"loss": total.item(), "recon": rec.item(), "vq": q.vq_loss.item(),
                   "commit": q.commit_loss.item()}, q, feats


def tokenizer_train_step(images: torch.Tensor, tok: VqTokenizer, optimizer, lr: float):
    """One optimisation step on L2 reconstruction + vq + beta * commitment."""
    tok.train()
    total, logs, q, feats = tokenizer_loss(images, tok)
    check_finite(total.detach(), "tokenizer loss")
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr)
    return logs, q.indices, feats.detach()


@torch.no_grad()
def reinit_dead_codes(tok: VqTokenizer, used: torch.Tensor, feats: torch.Tensor, rng: RngStream) -> int:
    """Reset entries with zero usage to randomly chosen encoder outputs."""
    dead = torch.nonzero(used == 0).flatten()
    if dead.numel() == 0:
        return 0
    pool = feats.reshape(-1, tok.codebook.dim)
    pick = torch.from_numpy(rng.numpy().integers(0, pool.shape[0], dead.numel()))
    tok.codebook.entries[dead] = pool[pick]
    return int(dead.numel())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR for images in [-1, 1] (peak-to-peak 2)."""
    mse = float((a - b).pow(2).mean())
    return float("inf") if mse == 0 else 10 * torch.log10(torch.tensor(4.0 / mse)).item()
