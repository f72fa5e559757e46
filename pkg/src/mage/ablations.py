"""Desk-scale ablation sweeps and the shared model evaluation behind them.

Each sweep trains one model per value of a single config key (all other
keys fixed), evaluates it, and writes ``sweep_<key>.csv`` with columns
``sweep_key,value,probe_acc,gen_tv,recon_ce`` plus a bar chart.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .evalkit import ProbeConfig, linear_probe, model_inputs, pooled_features_from_inputs, token_marginal_tv
from .losses import reconstructive_loss
from .masking import PlanBatch, build_mask_plan, sample_ratio
from .model import MageModel, forward_train
from .numerics import RngStream
from .pipeline.config import RunConfig
from .pipeline.train import build_model, load_data, train_mage
from .sampler import DecodeSchedule, generate
from .tokenizer import VqTokenizer, encode_image

log = logging.getLogger(__name__)

CSV_COLUMNS = ("sweep_key", "value", "probe_acc", "gen_tv", "recon_ce")

# default value grids; extra keys pinned per sweep
SWEEPS: dict[str, tuple[list, dict]] = {
    "mask.std": ([0.0, 0.25], {}),
    "model.bypass_quantizer": ([False, True], {}),
    "model.pad_mode": (["class_token", "mask_token"], {}),
    "augmentation": (["none", "weak", "strong"], {"train.cache_tokens": False}),
    "loss.contrastive_max_ratio": ([0.6, 1.0], {"loss.lambda": 0.1, "mask.max": 1.0}),
}


@dataclass
class EvalConfig:
    probe: ProbeConfig
    probe_seeds: int = 3
    gen_count: int = 500
    ce_seed: int = 5

    @classmethod
    def from_run(cls, cfg: RunConfig, **kw) -> "EvalConfig":
        probe = ProbeConfig(epochs=cfg["probe.epochs"], batch_size=cfg["probe.batch_size"], lr=cfg["probe.lr"],
                            warmup_epochs=cfg["probe.warmup_epochs"])
        return cls(probe, **kw)


class EvalData:
    """Model inputs and token targets for both splits, computed once."""

    def __init__(self, cfg: RunConfig, tok: VqTokenizer, model: MageModel):
        (xtr, self.ytr), (xte, self.yte) = load_data(cfg, "train"), load_data(cfg, "test")
        self.train_inputs = model_inputs(xtr, tok, model)
        self.test_inputs = model_inputs(xte, tok, model)
        self.train_tokens = encode_image(xtr, tok).flatten(1)
        self.test_tokens = encode_image(xte, tok).flatten(1)


@torch.no_grad()
def masked_ce(model: MageModel, inputs, targets, cfg: RunConfig, rng: RngStream,
              ratio: float | None = None, batch_size: int = 250) -> float:
    """Per-token cross-entropy on masked positions (no smoothing).

    Ratios are drawn from the config's distribution unless ``ratio`` pins
    one value (``1.0`` = generation from an empty canvas).
    """
    was = model.training
    model.eval()
    n, seq = inputs.shape[0], model.cfg.seq_len
    ratios = (np.full(n, ratio) if ratio is not None
              else sample_ratio(cfg.mask_dist(), rng.split("ratio"), n))
    total, count = 0.0, 0
    for s in range(0, n, batch_size):
        plan = PlanBatch.stack([build_mask_plan(seq, float(ratios[i]), rng.split(f"plan/{i}"))
                                for i in range(s, min(n, s + batch_size))])
        logits = forward_train(inputs[s:s + batch_size], plan, model)
        m = int(plan.masked.sum())
        total += float(reconstructive_loss(logits, targets[s:s + batch_size], plan.masked)) * m
        count += m
    model.train(was)
    return total / count


def probe_accuracy(model: MageModel, data: EvalData, pcfg: ProbeConfig, seeds: int = 3,
                   layer: int | None = None) -> list[float]:
    tr = pooled_features_from_inputs(data.train_inputs, data.ytr, model, layer)
    te = pooled_features_from_inputs(data.test_inputs, data.yte, model, layer)
    return [linear_probe(tr, te, pcfg, RngStream(s).split("probe")).accuracy for s in range(seeds)]


def generation_tv(model: MageModel, data: EvalData, cfg: RunConfig, count: int, seed: int = 0) -> float:
    if model.cfg.input_mode != "tokens":
        return math.nan  # a feature-input model has no token canvas to decode on
    sched = DecodeSchedule(cfg["sample.steps"], cfg["sample.gumbel_temperature"], cfg["sample.temperature"])
    grids = torch.cat([generate(model, sched, RngStream(seed).split(f"gen/{s}"), count=min(100, count - s))
                       for s in range(0, count, 100)])
    return token_marginal_tv(grids, data.train_tokens, model.cfg.vocab)


def evaluate(model: MageModel, tok: VqTokenizer, cfg: RunConfig, ecfg: EvalConfig,
             data: EvalData | None = None) -> dict:
    data = data or EvalData(cfg, tok, model)
    accs = probe_accuracy(model, data, ecfg.probe, ecfg.probe_seeds)
    return {
        "probe_acc": float(np.mean(accs)),
        "probe_accs": accs,
        "recon_ce": masked_ce(model, data.test_inputs, data.test_tokens, cfg, RngStream(ecfg.ce_seed)),
        "full_mask_ce": masked_ce(model, data.test_inputs, data.test_tokens, cfg, RngStream(ecfg.ce_seed), 1.0),
        "gen_tv": generation_tv(model, data, cfg, ecfg.gen_count) if ecfg.gen_count else math.nan,
    }


def random_init_baseline(cfg: RunConfig, tok: VqTokenizer, ecfg: EvalConfig,
                         data: EvalData | None = None) -> list[float]:
    """Probe accuracy of untrained encoders: one fresh init per probe seed."""
    accs = []
    for s in range(ecfg.probe_seeds):
        model = build_model(cfg.copy(seed=cfg["seed"] + 1000 + s)).eval()
        data = data or EvalData(cfg, tok, model)
        tr = pooled_features_from_inputs(data.train_inputs, data.ytr, model)
        te = pooled_features_from_inputs(data.test_inputs, data.yte, model)
        accs.append(linear_probe(tr, te, ecfg.probe, RngStream(s).split("probe")).accuracy)
    return accs


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})
    return path


def run_sweep(base: RunConfig, key: str, values=None, tokenizer: VqTokenizer | None = None,
              ecfg: EvalConfig | None = None, out_dir=None, plot: bool = True) -> list[dict]:
    """Train and evaluate one model per value of ``key``.

    Runs go to ``<out_dir>/<key>=<value>/``; the CSV and figure to
    ``out_dir``. Identical inputs give identical rows.
    """
    from .plotting import plot_sweep

    default_values, pinned = SWEEPS.get(key, (None, {}))
    values = values if values is not None else default_values
    if values is None:
        raise ValueError(f"no default values for sweep key {key!r}; pass them explicitly")
    out = Path(out_dir or base["out_dir"])
    ecfg = ecfg or EvalConfig.from_run(base)
    rows = []
    for v in values:
        cfg = base.copy(**pinned, **{key: v, "out_dir": str(out / f"{key}={v}")})
        if cfg["augmentation"] != "none":
            cfg["train.cache_tokens"] = False
        log.info("sweep %s = %s", key, v)
        res = train_mage(cfg, tokenizer=tokenizer)
        m = evaluate(res.extra["model"], res.extra["tokenizer"], cfg, ecfg)
        rows.append({"sweep_key": key, "value": v, **m})
    slug = key.replace(".", "_")
    write_csv(rows, out / f"sweep_{slug}.csv")
    if plot:
        plot_sweep(rows, out / f"sweep_{slug}.png")
    return rows


def layer_sweep(model: MageModel, tok: VqTokenizer, cfg: RunConfig, ecfg: EvalConfig,
                data: EvalData | None = None) -> list[float]:
    """Mean probe accuracy on the output of every encoder block."""
    data = data or EvalData(cfg, tok, model)
    return [float(np.mean(probe_accuracy(model, data, ecfg.probe, ecfg.probe_seeds, layer=b)))
            for b in range(model.cfg.enc_depth)]
