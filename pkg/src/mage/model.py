"""Bidirectional ViT encoder-decoder over token sequences."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import EncoderInput, PlanBatch, apply_mask
from .numerics import RngStream

PAD_MODES = ("class_token", "mask_token")
INPUT_MODES = ("tokens", "features")


@dataclass
class MageConfig:
    vocab: int = 64
    seq_len: int = 64
    width: int = 128
    enc_depth: int = 4
    dec_width: int = 128
    dec_depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    pad_mode: str = "class_token"
    input_mode: str = "tokens"
    feature_dim: int = 16  # used when input_mode == "features"
    proj_hidden: int = 256
    proj_dim: int = 64

    def __post_init__(self):
        if self.width % self.heads or self.dec_width % self.heads:
            raise ValueError("widths must be divisible by the head count")
        if self.pad_mode not in PAD_MODES:
            raise ValueError(f"pad_mode must be one of {PAD_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")

    def to_dict(self):
        return asdict(self)


def dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen) >= p
    return x * keep / (1.0 - p)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, p: float):
        super().__init__()
        self.heads, self.p = heads, p
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, gen=None):
        b, n, w = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (w // self.heads) ** -0.5
        att = dropout(att.softmax(dim=-1), self.p, gen)
        out = (att @ v).transpose(1, 2).reshape(b, n, w)
        return dropout(self.proj(out), self.p, gen)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width: int, heads: int, mlp_ratio: float, p: float):
        super().__init__()
        self.p = p
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, p)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x, gen=None):
        x = x + self.attn(self.norm1(x), gen)
        h = dropout(F.gelu(self.fc1(self.norm2(x))), self.p, gen)
        return x + dropout(self.fc2(h), self.p, gen)


@dataclass
class EncoderOutput:
    latents: torch.Tensor  # [B, 1 + L, width], slot 0 is [C]
    positions: torch.Tensor  # [B, L] original indices of the visible slots
    hidden: list | None = None  # per-block activations when requested

    @property
    def class_feature(self) -> torch.Tensor:
        return self.latents[:, 0]

    def pooled(self) -> torch.Tensor:
        """Average over token slots, class slot excluded."""
        return self.latents[:, 1:].mean(dim=1)


class ProjectionHead(nn.Module):
    """Two-layer MLP used by the contrastive objective; output unit-norm."""

    def __init__(self, width: int, hidden: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, x):
        return F.normalize(self.fc2(F.relu(self.fc1(x))), dim=-1)


class ConditionalDecoder(nn.Module):
    """Decoder that reads ``[label, C, tokens...]`` (length N + 2)."""

    def __init__(self, cfg: MageConfig, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.label_emb = nn.Parameter(torch.zeros(num_classes, cfg.dec_width))
        self.pos = nn.Parameter(torch.zeros(cfg.seq_len + 2, cfg.dec_width))
        self.blocks = nn.ModuleList(
            Block(cfg.dec_width, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.dec_depth))
        self.norm = nn.LayerNorm(cfg.dec_width)
        self.head = nn.Linear(cfg.dec_width, cfg.vocab)


def init_parameters(module: nn.Module, gen: torch.Generator):
    for name, p in sorted(module.named_parameters()):
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif "norm" in name:
            nn.init.ones_(p)
        elif p.ndim == 2 and not name.endswith(("emb", "pos")):
            nn.init.xavier_uniform_(p, generator=gen)
        else:
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)


class MageModel(nn.Module):
    def __init__(self, cfg: MageConfig | None = None, rng: RngStream | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MageConfig()
        n, w, dw = cfg.seq_len, cfg.width, cfg.dec_width
        if cfg.input_mode == "tokens":
            self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab, w))
        else:
            self.feat_proj = nn.Linear(cfg.feature_dim, w)
        self.mask_token = nn.Parameter(torch.zeros(w))
        self.cls_token = nn.Parameter(torch.zeros(w))
        self.enc_pos = nn.Parameter(torch.zeros(n + 1, w))  # row n is the class slot
        self.enc_blocks = nn.ModuleList(
            Block(w, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.enc_depth))
        self.enc_norm = nn.LayerNorm(w)
        self.dec_embed = nn.Linear(w, dw)
        if cfg.pad_mode == "mask_token":
            self.pad_token = nn.Parameter(torch.zeros(dw))
        self.dec_pos = nn.Parameter(torch.zeros(n + 1, dw))  # row 0 is the class slot
        self.dec_blocks = nn.ModuleList(
            Block(dw, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.dec_depth))
        self.dec_norm = nn.LayerNorm(dw)
        self.head = nn.Linear(dw, cfg.vocab)
        self.proj_head = ProjectionHead(w, cfg.proj_hidden, cfg.proj_dim)
        self.cond: ConditionalDecoder | None = None
        self.reset_parameters(rng or RngStream(0))

    def forward(self, tokens, plan, rng=None, labels=None):
        return forward_train(tokens, plan, self, rng, labels)

    def reset_parameters(self, rng: RngStream):
        init_parameters(self, rng.split("init").torch())

    def add_conditional_decoder(self, num_classes: int, rng: RngStream | None = None):
        self.cond = ConditionalDecoder(self.cfg, num_classes)
        init_parameters(self.cond, (rng or RngStream(0)).split("cond-init").torch())
        return self.cond

    def encoder_parameters(self):
        skip = ("dec_", "head.", "pad_token", "proj_head", "cond.")
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(skip)]

    def layer_id(self, name: str) -> int:
        """Depth index used for layer-wise learning-rate decay."""
        if name.startswith("enc_blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith(("tok_emb", "feat_proj", "mask_token", "cls_token", "enc_pos")):
            return 0
        return self.cfg.enc_depth + 1


def _gen(model: nn.Module, rng: RngStream | None):
    if not model.training or model.cfg.dropout == 0:
        return None
    if rng is None:
        raise ValueError("training-mode forward needs an RngStream for dropout")
    return rng.torch()


def embed_and_encode(inp: EncoderInput, model: MageModel, rng: RngStream | None = None,
                     keep_hidden: bool = False) -> EncoderOutput:
    cfg = model.cfg
    pos = inp.positions
    if pos.numel() and (pos.min() < 0 or pos.max() >= cfg.seq_len):
        raise IndexError("position out of range")
    if cfg.input_mode == "tokens":
        if inp.tokens is None:
            raise ValueError("model expects token input")
        x = model.tok_emb[inp.tokens.clamp(min=0)]
    else:
        if inp.features is None:
            raise ValueError("model expects continuous feature input")
        x = model.feat_proj(inp.features)
    x = torch.where(inp.is_mask[..., None], model.mask_token.expand_as(x), x)
    x = x + model.enc_pos[pos]
    cls = (model.cls_token + model.enc_pos[cfg.seq_len]).expand(x.shape[0], 1, -1)
    x = torch.cat([cls, x], dim=1)
    gen = _gen(model, rng)
    hidden = [] if keep_hidden else None
    for blk in model.enc_blocks:
        x = blk(x, gen)
        if keep_hidden:
            hidden.append(x)
    return EncoderOutput(model.enc_norm(x), pos, hidden)


def pad_with_class(enc: EncoderOutput, model: MageModel) -> torch.Tensor:
    """Scatter encoder latents back to ``[B, N + 1, dec_width]``.

    Slot 0 holds [C]; absent (dropped) slots get [C] copies, or the shared
    pad vector in ``mask_token`` mode. Positional embeddings are added later
    by :func:`decode_logits`.
    """
    x = model.dec_embed(enc.latents)
    b, _, dw = x.shape
    n = model.cfg.seq_len
    cls = x[:, :1]
    if model.cfg.pad_mode == "class_token":
        fill = cls.expand(b, n, dw)
    else:
        fill = model.pad_token.expand(b, n, dw)
    visible = torch.zeros(b, n, dtype=torch.bool)
    visible.scatter_(1, enc.positions, True)
    placed = torch.zeros(b, n, dw, dtype=x.dtype).scatter(
        1, enc.positions[..., None].expand(-1, -1, dw), x[:, 1:])
    body = torch.where(visible[..., None], placed, fill)
    return torch.cat([cls, body], dim=1)


def decode_logits(padded: torch.Tensor, model: MageModel, rng: RngStream | None = None) -> torch.Tensor:
    """Decoder + head; returns ``[B, N, K]`` logits (class slot discarded)."""
    if padded.shape[1] != model.cfg.seq_len + 1:
        raise ValueError("decoder expects N + 1 slots")
    gen = _gen(model, rng)
    x = padded + model.dec_pos
    for blk in model.dec_blocks:
        x = blk(x, gen)
    return model.head(model.dec_norm(x))[:, 1:]


def conditional_decode(padded: torch.Tensor, labels: torch.Tensor, model: MageModel,
                       rng: RngStream | None = None) -> torch.Tensor:
    """Class-conditional decoding: one label slot is prepended, so the
    conditional decoder reads N + 2 slots."""
    cond = model.cond
    if cond is None:
        raise ValueError("model has no conditional decoder (label table missing)")
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.min() < 0 or labels.max() >= cond.num_classes:
        raise IndexError("label out of range")
    lab = cond.label_emb[labels].expand(padded.shape[0], -1)[:, None]
    x = torch.cat([lab, padded], dim=1) + cond.pos
    gen = _gen(model, rng)
    for blk in cond.blocks:
        x = blk(x, gen)
    return cond.head(cond.norm(x))[:, 2:]


def encode(tokens: torch.Tensor, plan: PlanBatch, model: MageModel, rng=None, keep_hidden=False):
    return embed_and_encode(apply_mask(tokens, plan), model, rng, keep_hidden)


def forward_train(tokens: torch.Tensor, plan: PlanBatch, model: MageModel,
                  rng: RngStream | None = None, labels=None, return_encoder: bool = False):
    """apply_mask -> encode -> pad -> decode. ``tokens`` is ``[B, N]`` ids,
    or ``[B, N, d]`` features for a quantizer-bypass model."""
    if tokens.shape[1] != model.cfg.seq_len:
        raise ValueError(f"expected {model.cfg.seq_len} tokens, got {tokens.shape[1]}")
    enc = encode(tokens, plan, model, rng.split("enc") if rng else None)
    padded = pad_with_class(enc, model)
    if labels is None:
        logits = decode_logits(padded, model, rng.split("dec") if rng else None)
    else:
        logits = conditional_decode(padded, labels, model, rng.split("dec") if rng else None)
    return (logits, enc) if return_encoder else logits
