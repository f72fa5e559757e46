"""Training loops for the tokenizer, MAGE pre-training and the
class-conditional decoder."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..losses import ContrastiveConfig, combined_loss, reconstructive_loss
from ..masking import PlanBatch, build_mask_plan, sample_ratio
from ..model import MageModel, forward_train
from ..numerics import AdamW, NumericError, RngStream, check_finite, cosine_lr, scaled_lr
from ..tokenizer import VqTokenizer, encode_image, reinit_dead_codes, tokenizer_train_step
from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint, load_module,
                         module_tensors, save_checkpoint)
from .config import ConfigError, RunConfig
from .data import augment_batch, ingest_dataset

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list = field(default_factory=list)  # per-step metric dicts
    extra: dict = field(default_factory=dict)


def load_data(cfg: RunConfig, split: str):
    n = cfg["data.train_size"] if split == "train" else cfg["data.test_size"]
    return ingest_dataset(cfg["data.source"], split, n=n, seed=cfg["data.seed"],
                          size=cfg["data.image_size"])


def _metrics_line(step: int, **kw) -> str:
    return " ".join([f"step={step}"] + [f"{k}={v:.6f}" for k, v in kw.items()]) + "\n"


# ---------------------------------------------------------------------------
# tokenizer


def tokenizer_checkpoint(tok: VqTokenizer, cfg: RunConfig, extra_meta=None) -> Checkpoint:
    meta = {"kind": "tokenizer", "config": cfg.to_json(), **(extra_meta or {})}
    return Checkpoint(meta, module_tensors(tok, "tokenizer"))


def tokenizer_from_checkpoint(ckpt: Checkpoint) -> VqTokenizer:
    cfg = RunConfig(ckpt.meta["config"])
    tok = VqTokenizer(cfg.vq_config())
    load_module(tok, ckpt.group("tokenizer"))
    tok.eval()
    return tok


def load_tokenizer(path) -> VqTokenizer:
    return tokenizer_from_checkpoint(load_checkpoint(path))


def train_tokenizer(cfg: RunConfig) -> TrainResult:
    torch.set_num_threads(1)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(cfg["seed"]).split("tokenizer")
    images, _ = load_data(cfg, "train")
    tok = VqTokenizer(cfg.vq_config(), rng.split("model"))
    opt = AdamW(tok.named_parameters(), betas=(0.9, 0.99), weight_decay=0.0, clip_norm=cfg["optim.clip"])
    bs = cfg["tokenizer.batch_size"]
    spe = max(1, images.shape[0] // bs)
    total = cfg["tokenizer.epochs"] * spe
    warm = round(cfg["optim.warmup_frac"] * total)
    k = tok.codebook.size
    losses, step = [], 0
    path = out / "tokenizer.ckpt"
    with open(out / "tokenizer_metrics.log", "w") as mlog:
        for epoch in range(cfg["tokenizer.epochs"]):
            perm = torch.from_numpy(rng.split(f"epoch/{epoch}").numpy().permutation(images.shape[0]))
            used = torch.zeros(k, dtype=torch.long)
            for i in range(spe):
                srng = rng.split(f"step/{step}")
                batch = augment_batch(images[perm[i * bs:(i + 1) * bs]], cfg["augmentation"], srng)
                logs, idx, feats = tokenizer_train_step(batch, tok, opt, cosine_lr(step, total, cfg["tokenizer.lr"], warm))
                used += torch.bincount(idx.flatten(), minlength=k)
                losses.append(logs)
                mlog.write(_metrics_line(step, **logs))
                step += 1
            dead = reinit_dead_codes(tok, used, feats, rng.split(f"reinit/{epoch}"))
            log.info("tokenizer epoch %d loss %.4f used %d/%d reinit %d", epoch, logs["loss"],
                     int((used > 0).sum()), k, dead)
    tok.eval()
    save_checkpoint(tokenizer_checkpoint(tok, cfg, {"step": step}), path)
    return TrainResult(path, losses)


# ---------------------------------------------------------------------------
# MAGE pre-training


def build_model(cfg: RunConfig) -> MageModel:
    return MageModel(cfg.model_config(), RngStream(cfg["seed"]).split("mage/model"))


def make_optimizer(model: MageModel, cfg: RunConfig) -> AdamW:
    return AdamW(model.named_parameters(), betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
                 weight_decay=cfg["optim.weight_decay"], clip_norm=cfg["optim.clip"],
                 no_decay=("pos", "emb", "token"))


def mage_checkpoint(model: MageModel, tok: VqTokenizer, cfg: RunConfig, opt: AdamW | None = None,
                    step: int = 0, rng: RngStream | None = None, extra_meta=None) -> Checkpoint:
    tensors = {**module_tensors(model, "model"), **module_tensors(tok, "tokenizer")}
    if opt is not None:
        tensors.update({f"optim/{k}": v for k, v in opt.state_tensors().items()})
    meta = {"kind": "mage", "config": cfg.to_json(), "step": step,
            "rng": rng.state() if rng else None,
            "num_classes": model.cond.num_classes if model.cond is not None else 0,
            **(extra_meta or {})}
    return Checkpoint(meta, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MageModel, VqTokenizer, RunConfig]:
    if ckpt.meta.get("kind") != "mage":
        raise CheckpointError(f"expected a mage checkpoint, got {ckpt.meta.get('kind')!r}")
    cfg = RunConfig(ckpt.meta["config"])
    model = MageModel(cfg.model_config())
    if ckpt.meta.get("num_classes"):
        model.add_conditional_decoder(ckpt.meta["num_classes"])
    load_module(model, ckpt.group("model"))
    tok = VqTokenizer(cfg.vq_config())
    load_module(tok, ckpt.group("tokenizer"))
    model.eval()
    tok.eval()
    return model, tok, cfg


def load_model(path) -> tuple[MageModel, VqTokenizer, RunConfig]:
    return model_from_checkpoint(load_checkpoint(path))


class BatchSource:
    """Produces ``(inputs, targets)`` per step; inputs are token ids or,
    with the quantizer bypassed, continuous encoder features."""

    def __init__(self, images, tok: VqTokenizer, cfg: RunConfig, bypass: bool):
        self.images, self.tok, self.cfg, self.bypass = images, tok, cfg, bypass
        self.policy = cfg["augmentation"]
        self.cache = None
        if cfg["train.cache_tokens"]:
            if self.policy != "none":
                raise ConfigError("train.cache_tokens requires augmentation = none")
            self.cache = self._encode(images)

    @torch.no_grad()
    def _encode(self, imgs):
        targets = torch.cat([encode_image(imgs[s:s + 256], self.tok).flatten(1)
                             for s in range(0, imgs.shape[0], 256)])
        if self.bypass:
            feats = torch.cat([self.tok.features(imgs[s:s + 256]).flatten(1, 2)
                               for s in range(0, imgs.shape[0], 256)])
            return feats, targets
        return targets, targets

    def batch(self, idx, rng: RngStream):
        if self.cache is not None:
            return self.cache[0][idx], self.cache[1][idx]
        return self._encode(augment_batch(self.images[idx], self.policy, rng))


def _plans(n_tokens: int, batch: int, cfg: RunConfig, rng: RngStream) -> PlanBatch:
    ratios = sample_ratio(cfg.mask_dist(), rng.split("ratio"), batch)
    return PlanBatch.stack([build_mask_plan(n_tokens, float(r), rng.split(f"plan/{i}"))
                            for i, r in enumerate(ratios)])


def mage_step_loss(model: MageModel, source: BatchSource, idx, cfg: RunConfig, srng: RngStream):
    """Loss for one batch. With ``loss.lambda > 0`` a second augmented view
    is encoded and the InfoNCE term is added."""
    n = model.cfg.seq_len
    ccfg = ContrastiveConfig(cfg["loss.temperature"], cfg["loss.lambda"], cfg["loss.contrastive_max_ratio"])
    smoothing = cfg["loss.label_smoothing"]
    inputs, targets = source.batch(idx, srng.split("aug/0"))
    plan = _plans(n, len(idx), cfg, srng.split("mask/0"))
    logits, enc = forward_train(inputs, plan, model, srng.split("fwd/0"), return_encoder=True)
    recon = reconstructive_loss(logits, targets, plan.masked, smoothing)
    z1 = z2 = r2 = None
    if ccfg.weight > 0:
        inputs2, targets2 = source.batch(idx, srng.split("aug/1"))
        plan2 = _plans(n, len(idx), cfg, srng.split("mask/1"))
        logits2, enc2 = forward_train(inputs2, plan2, model, srng.split("fwd/1"), return_encoder=True)
        recon = 0.5 * (recon + reconstructive_loss(logits2, targets2, plan2.masked, smoothing))
        z1, z2, r2 = model.proj_head(enc.pooled()), model.proj_head(enc2.pooled()), plan2.ratios
    total, contrast = combined_loss(recon, z1, z2, plan.ratios, r2, ccfg)
    return total, recon, contrast, plan


def train_mage(cfg: RunConfig, resume: str | Path | None = None, tokenizer: VqTokenizer | None = None,
               data=None) -> TrainResult:
    """Pre-train an encoder-decoder; writes ``mage.ckpt`` and ``metrics.log``.

    ``resume`` continues from a checkpoint written by this function; the
    data order, masks and dropout depend only on ``(seed, step)``, so a
    resumed run retraces the uninterrupted one.
    """
    torch.set_num_threads(1)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(cfg["seed"]).split("mage")
    if tokenizer is None:
        if not cfg["tokenizer.checkpoint"]:
            raise ConfigError("tokenizer.checkpoint is required for train-mage")
        tokenizer = load_tokenizer(cfg["tokenizer.checkpoint"])
    tok = tokenizer.eval()
    images, _ = data if data is not None else load_data(cfg, "train")
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        load_module(model, ck.group("model"))
        opt.load_state_tensors(ck.group("optim"), ck.meta["step"])
        start = ck.meta["step"]
    source = BatchSource(images, tok, cfg, model.cfg.input_mode == "features")
    bs = cfg["train.batch_size"]
    n_img = images.shape[0]
    spe = max(1, n_img // bs)
    total = cfg["train.epochs"] * spe
    stop = min(total, cfg["train.max_steps"]) if cfg["train.max_steps"] else total
    warm = round(cfg["optim.warmup_frac"] * total)
    peak = scaled_lr(cfg["optim.base_lr"], bs)
    path = out / "mage.ckpt"
    losses = []
    model.train()
    t0, seen = time.perf_counter(), 0
    ratio_hist = np.zeros(10, dtype=np.int64)
    with open(out / "metrics.log", "a" if resume else "w") as mlog:
        for step in range(start, stop):
            epoch = step // spe
            perm = rng.split(f"epoch/{epoch}").numpy().permutation(n_img)
            i = step % spe
            idx = torch.from_numpy(perm[i * bs:(i + 1) * bs])
            srng = rng.split(f"step/{step}")
            total_loss, recon, contrast, plan = mage_step_loss(model, source, idx, cfg, srng)
            try:
                check_finite(total_loss.detach(), "training loss")
                opt.zero_grad()
                total_loss.backward()
                opt.step(cosine_lr(step, total, peak, warm))
            except NumericError:
                log.error("numeric abort at step %d; last good checkpoint kept at %s", step, path)
                raise
            rec = {"loss": total_loss.item(), "recon": recon.item(), "contrast": float(contrast.detach()),
                   "mr_mean": float(plan.ratios.mean())}
            losses.append(rec)
            mlog.write(_metrics_line(step, **rec))
            seen += len(idx) * model.cfg.seq_len
            ratio_hist += np.histogram(plan.ratios.numpy(), bins=10, range=(0, 1))[0]
            if (step + 1) % spe == 0:
                log.info("epoch %d step %d loss %.4f tokens/s %.0f m_r hist %s", epoch, step + 1,
                         rec["loss"], seen / (time.perf_counter() - t0), ratio_hist.tolist())
                if (epoch + 1) % cfg["train.checkpoint_every"] == 0:
                    save_checkpoint(mage_checkpoint(model, tok, cfg, opt, step + 1, rng), path)
    save_checkpoint(mage_checkpoint(model, tok, cfg, opt, stop, rng), path)
    model.eval()
    return TrainResult(path, losses, {"model": model, "tokenizer": tok})


# ---------------------------------------------------------------------------
# class-conditional decoder


def train_conditional(ckpt_path, cfg: RunConfig | None = None, data=None) -> TrainResult:
    """Train a label-conditioned decoder on top of a frozen pre-trained
    encoder; writes ``mage_cond.ckpt``."""
    torch.set_num_threads(1)
    model, tok, base = load_model(ckpt_path)
    cfg = cfg or base
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    images, labels = data if data is not None else load_data(cfg, "train")
    num_classes = int(labels.max()) + 1
    rng = RngStream(cfg["seed"]).split("cond")
    model.add_conditional_decoder(num_classes, rng)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.cond.parameters():
        p.requires_grad_(True)
    opt = AdamW(model.cond.named_parameters(), betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
                weight_decay=cfg["optim.weight_decay"], clip_norm=cfg["optim.clip"],
                no_decay=("pos", "emb"))
    source = BatchSource(images, tok, cfg, model.cfg.input_mode == "features")
    bs = cfg["train.batch_size"]
    spe = max(1, images.shape[0] // bs)
    total = cfg["cond.epochs"] * spe
    warm = round(cfg["optim.warmup_frac"] * total)
    losses = []
    model.train()
    for step in range(total):
        perm = rng.split(f"epoch/{step // spe}").numpy().permutation(images.shape[0])
        idx = torch.from_numpy(perm[(step % spe) * bs:(step % spe + 1) * bs])
        srng = rng.split(f"step/{step}")
        inputs, targets = source.batch(idx, srng.split("aug"))
        plan = _plans(model.cfg.seq_len, len(idx), cfg, srng.split("mask"))
        logits = forward_train(inputs, plan, model, srng.split("fwd"), labels=labels[idx])
        loss = reconstructive_loss(logits, targets, plan.masked, cfg["loss.label_smoothing"])
        check_finite(loss.detach(), "conditional loss")
        opt.zero_grad()
        loss.backward()
        opt.step(cosine_lr(step, total, cfg["cond.lr"], warm))
        losses.append({"loss": loss.item()})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    path = out / "mage_cond.ckpt"
    save_checkpoint(mage_checkpoint(model, tok, cfg, None, total), path)
    return TrainResult(path, losses, {"model": model, "tokenizer": tok})
