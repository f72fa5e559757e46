"""Representation probes and token-level generation metrics."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .masking import PlanBatch, zero_plan
from .model import MageModel, encode
from .numerics import AdamW, RngStream, cosine_lr, softmax_cross_entropy
from .tokenizer import VqTokenizer, encode_image


@dataclass
class ProbeConfig:
    epochs: int = 90
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 10
    freeze_encoder: bool = True
    samples_per_class: int | None = None
    # fine-tuning only
    ft_lr: float = 2.5e-4
    ft_weight_decay: float = 0.05
    layer_decay: float = 0.65
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


@dataclass
class FeatureSet:
    features: torch.Tensor  # [n, width]
    labels: torch.Tensor  # [n]

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "FeatureSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return FeatureSet(self.features[idx], self.labels[idx])


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    history: list = field(default_factory=list)  # (epoch, train_acc, test_acc)


def model_inputs(images: torch.Tensor, tokenizer: VqTokenizer, model: MageModel) -> torch.Tensor:
    """Tokens (or unquantized features) in the layout the model consumes."""
    if model.cfg.input_mode == "features":
        with torch.no_grad():
            return tokenizer.features(images).flatten(1, 2)
    return encode_image(images, tokenizer).flatten(1)


@torch.no_grad()
def pooled_features_from_inputs(inputs: torch.Tensor, labels, model: MageModel,
                                layer: int | None = None, batch_size: int = 256) -> FeatureSet:
    was = model.training
    model.eval()
    feats = []
    n = model.cfg.seq_len
    for s in range(0, inputs.shape[0], batch_size):
        x = inputs[s:s + batch_size]
        plan = PlanBatch.stack([zero_plan(n)] * x.shape[0])
        enc = encode(x, plan, model, keep_hidden=layer is not None)
        if layer is None:
            feats.append(enc.pooled())
        else:
            feats.append(enc.hidden[layer][:, 1:].mean(dim=1))
    model.train(was)
    return FeatureSet(torch.cat(feats), torch.as_tensor(labels))


def pooled_features(images: torch.Tensor, labels, tokenizer: VqTokenizer, model: MageModel,
                    layer: int | None = None) -> FeatureSet:
    """Tokenize, run the encoder unmasked, average token slots.

    ``layer`` selects the output of one encoder block (before the final
    norm) instead of the normalized encoder output.
    """
    return pooled_features_from_inputs(model_inputs(images, tokenizer, model), labels, model, layer)


def _standardize(train: torch.Tensor, *others):
    mu, sd = train.mean(0), train.std(0) + 1e-6
    return [(x - mu) / sd for x in (train, *others)]


def _accuracy(logits, labels) -> float:
    return float((logits.argmax(1) == labels).float().mean())


def linear_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig | None = None,
                 rng: RngStream | None = None) -> ProbeResult:
    """Linear classifier on frozen features: momentum SGD, cosine decay.

    Features are standardized with training statistics (a parameter-free
    batch norm, as is customary for probes).
    """
    cfg = cfg or ProbeConfig()
    rng = rng or RngStream(0)
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    if classes < 2:
        raise ValueError("need at least two classes")
    missing = set(test.labels.tolist()) - set(train.labels.tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the training features")
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("train/test feature dims differ")
    xtr, xte = _standardize(train.features.float(), test.features.float())
    ytr, yte = train.labels, test.labels
    head = nn.Linear(xtr.shape[1], classes)
    gen = rng.split("init").torch()
    nn.init.normal_(head.weight, std=0.01, generator=gen)
    nn.init.zeros_(head.bias)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    n = xtr.shape[0]
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = cfg.epochs * per_epoch
    warm = min(cfg.warmup_epochs, cfg.epochs // 4) * per_epoch
    history, step = [], 0
    for epoch in range(cfg.epochs):
        perm = torch.from_numpy(rng.split(f"epoch/{epoch}").numpy().permutation(n))
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, cfg.lr, warm)
            loss = softmax_cross_entropy(head(xtr[idx]), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        with torch.no_grad():
            history.append((epoch, _accuracy(head(xtr), ytr), _accuracy(head(xte), yte)))
    return ProbeResult(history[-1][2], history[-1][1], history)


def sample_per_class(labels: torch.Tensor, n: int, rng: RngStream) -> np.ndarray:
    gen = rng.numpy()
    idx = []
    for c in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels.numpy() == c)
        if members.size < n:
            raise ValueError(f"class {c} has {members.size} samples, need {n}")
        idx.append(np.sort(gen.choice(members, n, replace=False)))
    return np.concatenate(idx)


def few_shot_probe(train: FeatureSet, test: FeatureSet, n_per_class: int,
                   cfg: ProbeConfig | None = None, rng: RngStream | None = None) -> ProbeResult:
    """Linear probe trained on ``n_per_class`` samples of every class."""
    rng = rng or RngStream(0)
    sub = train.subset(sample_per_class(train.labels, n_per_class, rng.split("subsample")))
    return linear_probe(sub, test, cfg, rng.split("probe"))


class _Classifier(nn.Module):
    def __init__(self, model: MageModel, classes: int):
        super().__init__()
        self.model = model
        self.norm = nn.LayerNorm(model.cfg.width)
        self.fc = nn.Linear(model.cfg.width, classes)

    def forward(self, x, rng=None):
        n = self.model.cfg.seq_len
        plan = PlanBatch.stack([zero_plan(n)] * x.shape[0])
        return self.fc(self.norm(encode(x, plan, self.model, rng).pooled()))


def fine_tune(train_inputs: torch.Tensor, train_labels: torch.Tensor, test_inputs: torch.Tensor,
              test_labels: torch.Tensor, model: MageModel, cfg: ProbeConfig | None = None,
              rng: RngStream | None = None) -> ProbeResult:
    """End-to-end classification on model inputs (token ids or features).

    ``freeze_encoder=True`` reduces to :func:`linear_probe` on pooled
    features. Otherwise the encoder is trained with AdamW and layer-wise
    learning-rate decay ``cfg.layer_decay ** (depth + 1 - layer)``. The
    passed ``model`` is not modified.
    """
    cfg = cfg or ProbeConfig()
    rng = rng or RngStream(0)
    if cfg.freeze_encoder:
        tr = pooled_features_from_inputs(train_inputs, train_labels, model)
        te = pooled_features_from_inputs(test_inputs, test_labels, model)
        return linear_probe(tr, te, cfg, rng)
    classes = int(max(train_labels.max(), test_labels.max())) + 1
    clf = _Classifier(copy.deepcopy(model), classes)
    nn.init.normal_(clf.fc.weight, std=0.01, generator=rng.split("head").torch())
    nn.init.zeros_(clf.fc.bias)
    depth = model.cfg.enc_depth
    named = [(f"model.{n}", p) for n, p in clf.model.encoder_parameters()]
    named += [(n, p) for n, p in clf.named_parameters() if not n.startswith("model.")]
    scales = {n: cfg.layer_decay ** (depth + 1 - (clf.model.layer_id(n[6:]) if n.startswith("model.")
                                                  else depth + 1)) for n, _ in named}
    opt = AdamW(named, betas=(0.9, 0.999), weight_decay=cfg.ft_weight_decay, clip_norm=None,
                no_decay=("pos", "emb", "token"), lr_scales=scales)
    n = train_inputs.shape[0]
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = cfg.epochs * per_epoch
    warm = min(cfg.warmup_epochs, cfg.epochs // 4) * per_epoch
    history, step = [], 0
    for epoch in range(cfg.epochs):
        clf.train()
        perm = torch.from_numpy(rng.split(f"epoch/{epoch}").numpy().permutation(n))
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            loss = softmax_cross_entropy(clf(train_inputs[idx], rng.split(f"step/{step}")),
                                         train_labels[idx], cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, total, cfg.ft_lr, warm))
            step += 1
        clf.eval()
        with torch.no_grad():
            history.append((epoch, _accuracy(clf(train_inputs), train_labels),
                            _accuracy(clf(test_inputs), test_labels)))
    return ProbeResult(history[-1][2], history[-1][1], history)


def token_marginal_tv(corpus_a: torch.Tensor, corpus_b: torch.Tensor, vocab: int | None = None) -> float:
    """Total-variation distance between the token-index histograms."""
    a = torch.as_tensor(corpus_a).flatten().long()
    b = torch.as_tensor(corpus_b).flatten().long()
    if a.numel() == 0 or b.numel() == 0:
        raise ValueError("empty corpus")
    k = vocab or int(max(a.max(), b.max())) + 1
    pa = torch.bincount(a, minlength=k).double() / a.numel()
    pb = torch.bincount(b, minlength=k).double() / b.numel()
    return float(0.5 * (pa - pb).abs().sum())
