"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error (unreadable
images, corrupt checkpoints), 4 numeric abort (non-finite loss/gradient).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from ..numerics import NumericError, RngStream
from .checkpoint import CheckpointError
from .config import SCHEMA, ConfigError, RunConfig
from .data import DataError, load_png, save_png

log = logging.getLogger("mage")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    for flag, key in (("cache_tokens", "train.cache_tokens"), ("bypass_quantizer", "model.bypass_quantizer")):
        if getattr(args, flag, False):
            overrides[key] = True
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig(overrides)


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _schedule(cfg: RunConfig, args):
    from ..sampler import DecodeSchedule
    return DecodeSchedule(args.steps or cfg["sample.steps"],
                          cfg["sample.gumbel_temperature"] if args.temperature is None else args.temperature,
                          cfg["sample.temperature"])


def _load(path):
    from .train import load_model
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_model(path)


# ---------------------------------------------------------------------------


def cmd_train_tokenizer(args, cfg):
    from ..plotting import plot_loss_curve
    from ..tokenizer import decode_tokens, encode_image, psnr
    from .train import load_data, load_tokenizer, train_tokenizer
    res = train_tokenizer(cfg)
    out = _out(cfg)
    tok = load_tokenizer(res.checkpoint)
    images, _ = load_data(cfg, "test")
    score = psnr(decode_tokens(encode_image(images, tok), tok), images)
    plot_loss_curve(res.losses, out / "tokenizer_loss.png", keys=("loss", "recon"))
    (out / "tokenizer_report.txt").write_text(f"checkpoint {res.checkpoint}\ntest_psnr_db {score:.3f}\n")
    print(f"tokenizer: {res.checkpoint} test PSNR {score:.2f} dB")


def cmd_train_mage(args, cfg):
    from ..plotting import plot_loss_curve
    from .train import train_mage
    res = train_mage(cfg, resume=args.resume)
    plot_loss_curve(res.losses, _out(cfg) / "mage_loss.png")
    print(f"mage: {res.checkpoint} final loss {res.losses[-1]['loss']:.4f}" if res.losses else f"mage: {res.checkpoint}")


def cmd_train_conditional(args, cfg):
    from .train import train_conditional
    base = _load(args.checkpoint)[2]
    run = base.copy(**{k: v for k, v in cfg.items() if k in ("out_dir", "seed", "cond.epochs", "cond.lr")})
    res = train_conditional(args.checkpoint, run)
    print(f"conditional: {res.checkpoint}")


def cmd_generate(args, cfg):
    from ..plotting import plot_image_grid
    from ..sampler import generate
    from ..tokenizer import decode_tokens
    model, tok, _ = _load(args.checkpoint)
    out = _out(cfg)
    labels = None if args.label is None else torch.full((args.count,), args.label)
    grids = generate(model, _schedule(cfg, args), RngStream(cfg["seed"]).split("generate"), args.count, labels)
    images = decode_tokens(grids, tok)
    for i, img in enumerate(images):
        save_png(img, out / f"sample_{i:04d}.png")
    np.save(out / "tokens.npy", grids.numpy())
    plot_image_grid(images[:64], out / "samples_grid.png")
    print(f"wrote {args.count} samples to {out}")


def cmd_inpaint(args, cfg):
    from ..sampler import inpaint
    from ..tokenizer import decode_tokens, encode_image
    model, tok, mcfg = _load(args.checkpoint)
    image = load_png(args.image)
    mask = load_png(args.mask_png).mean(0) > 0  # white = regenerate
    if mask.shape != image.shape[1:]:
        raise DataError("mask and image sizes differ")
    s = mcfg["data.image_size"] // mcfg.token_side()
    region = torch.nn.functional.max_pool2d(mask[None, None].float(), s)[0, 0] > 0
    grid = encode_image(image, tok)
    if grid.shape != region.shape:
        raise DataError(f"image must be {mcfg['data.image_size']}px square")
    new = inpaint(grid, region, model, _schedule(cfg, args), RngStream(cfg["seed"]).split("inpaint"))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(decode_tokens(new, tok), args.out)
    print(f"inpainted {int(region.sum())} tokens -> {args.out}")


def cmd_probe(args, cfg):
    from ..evalkit import (ProbeConfig, few_shot_probe, fine_tune, linear_probe, model_inputs,
                           pooled_features_from_inputs)
    from ..plotting import plot_probe_history
    from .train import load_data
    model, tok, mcfg = _load(args.checkpoint)
    data_cfg = mcfg.copy(**{"data.source": args.dataset}) if args.dataset else mcfg
    (xtr, ytr), (xte, yte) = load_data(data_cfg, "train"), load_data(data_cfg, "test")
    pcfg = ProbeConfig(epochs=cfg["probe.epochs"], batch_size=cfg["probe.batch_size"], lr=cfg["probe.lr"],
                       warmup_epochs=cfg["probe.warmup_epochs"], freeze_encoder=not args.finetune,
                       samples_per_class=args.samples_per_class, ft_lr=cfg["probe.ft_lr"],
                       layer_decay=cfg["probe.layer_decay"])
    rng = RngStream(cfg["seed"]).split("probe")
    itr, ite = model_inputs(xtr, tok, model), model_inputs(xte, tok, model)
    if args.finetune:
        if args.samples_per_class or args.layer is not None:
            raise ConfigError("--finetune cannot be combined with --samples-per-class or --layer")
        res, mode = fine_tune(itr, ytr, ite, yte, model, pcfg, rng), "finetune"
    else:
        if args.layer is not None and not 0 <= args.layer < model.cfg.enc_depth:
            raise ConfigError(f"--layer must lie in [0, {model.cfg.enc_depth - 1}]")
        tr = pooled_features_from_inputs(itr, ytr, model, args.layer)
        te = pooled_features_from_inputs(ite, yte, model, args.layer)
        if args.samples_per_class:
            res, mode = few_shot_probe(tr, te, args.samples_per_class, pcfg, rng), f"few-shot n={args.samples_per_class}"
        else:
            res, mode = linear_probe(tr, te, pcfg, rng), "linear"
    out = _out(cfg)
    with open(out / "probe_history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_acc", "test_acc"])
        w.writerows([e, f"{a:.6f}", f"{b:.6f}"] for e, a, b in res.history)
    layer = "final" if args.layer is None else str(args.layer)
    (out / "probe_report.txt").write_text(
        f"checkpoint {args.checkpoint}\nmode {mode}\nlayer {layer}\n"
        f"train_samples {len(ytr) if not args.samples_per_class else args.samples_per_class * len(set(ytr.tolist()))}\n"
        f"test_samples {len(yte)}\ntrain_accuracy {res.train_accuracy:.4f}\ntest_accuracy {res.accuracy:.4f}\n")
    plot_probe_history(res.history, out / "probe_history.png", title=f"{mode}, layer {layer}")
    print(f"probe ({mode}, layer {layer}): test accuracy {res.accuracy:.4f}")


def cmd_eval_gen(args, cfg):
    from ..evalkit import token_marginal_tv
    from ..sampler import generate
    from ..tokenizer import encode_image
    from .train import load_data
    model, tok, mcfg = _load(args.checkpoint)
    images, _ = load_data(mcfg, "train")
    ref = encode_image(images, tok)
    grids = generate(model, _schedule(cfg, args), RngStream(cfg["seed"]).split("eval-gen"), args.count)
    tv = token_marginal_tv(grids, ref, model.cfg.vocab)
    out = _out(cfg)
    (out / "eval_gen.txt").write_text(f"checkpoint {args.checkpoint}\nsamples {args.count}\ntoken_marginal_tv {tv:.6f}\n")
    print(f"token-marginal TV over {args.count} samples: {tv:.4f}")


def cmd_ablate(args, cfg):
    from ..ablations import EvalConfig, layer_sweep, run_sweep
    from ..plotting import plot_layer_probe
    out = _out(cfg)
    if args.key == "probe.layer":
        model, tok, mcfg = _load(args.checkpoint)
        accs = layer_sweep(model, tok, mcfg, EvalConfig.from_run(cfg, gen_count=0))
        with open(out / "sweep_probe_layer.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sweep_key", "value", "probe_acc", "gen_tv", "recon_ce"])
            w.writerows(["probe.layer", b, f"{a:.6f}", "", ""] for b, a in enumerate(accs))
        plot_layer_probe(accs, out / "sweep_probe_layer.png")
        print(json.dumps({"probe.layer": accs}))
        return
    if args.key not in SCHEMA:
        raise ConfigError(f"unknown sweep key {args.key!r}")
    values = None
    if args.values:
        values = [RunConfig({args.key: v})[args.key] for v in args.values]
    rows = run_sweep(cfg, args.key, values, out_dir=out)
    for r in rows:
        print(f"{r['sweep_key']}={r['value']}: probe {r['probe_acc']:.4f} tv {r['gen_tv']:.4f} ce {r['recon_ce']:.4f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mage", description="Masked generative encoder: desk-scale toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-tokenizer", parents=[common], help="train the VQ tokenizer")

    t = sub.add_parser("train-mage", parents=[common], help="pre-train the encoder-decoder")
    t.add_argument("--resume", help="continue from a mage checkpoint")
    t.add_argument("--cache-tokens", action="store_true", help="tokenize once (augmentation = none only)")
    t.add_argument("--bypass-quantizer", action="store_true", help="feed unquantized encoder features")

    c = sub.add_parser("train-conditional", parents=[common], help="train a label-conditioned decoder")
    c.add_argument("--checkpoint", required=True)

    for name in ("generate", "inpaint", "eval-gen"):
        g = sub.add_parser(name, parents=[common])
        g.add_argument("--checkpoint", required=True)
        g.add_argument("--steps", type=int, help="decoding iterations")
        g.add_argument("--temperature", type=float, help="Gumbel temperature for ranking")
        if name == "generate":
            g.add_argument("--count", type=int, default=16)
            g.add_argument("--label", type=int, help="class id (needs a conditional checkpoint)")
        elif name == "eval-gen":
            g.add_argument("--count", type=int, default=500)
        else:
            g.add_argument("--image", required=True)
            g.add_argument("--mask-png", required=True, help="white pixels mark the region to regenerate")
            g.add_argument("--out", required=True)

    pr = sub.add_parser("probe", parents=[common], help="linear / few-shot probe or fine-tune")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--dataset", help="'synthetic' or a directory of class subfolders")
    pr.add_argument("--samples-per-class", type=int)
    mode = pr.add_mutually_exclusive_group()
    mode.add_argument("--freeze", dest="finetune", action="store_false", default=False)
    mode.add_argument("--finetune", dest="finetune", action="store_true")
    pr.add_argument("--layer", type=int, help="probe the output of this encoder block")

    a = sub.add_parser("ablate", parents=[common], help="one-key sweep -> CSV + figure")
    a.add_argument("key", help="config key to vary, or probe.layer")
    a.add_argument("--values", nargs="+")
    a.add_argument("--checkpoint", help="required for the probe.layer sweep")
    return p


COMMANDS = {
    "train-tokenizer": cmd_train_tokenizer, "train-mage": cmd_train_mage,
    "train-conditional": cmd_train_conditional, "generate": cmd_generate, "inpaint": cmd_inpaint,
    "probe": cmd_probe, "eval-gen": cmd_eval_gen, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse uses 2 for usage errors already
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _config(args)
        if args.command == "ablate" and args.key == "probe.layer" and not args.checkpoint:
            raise ConfigError("probe.layer sweep needs --checkpoint")
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
