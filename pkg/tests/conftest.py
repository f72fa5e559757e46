import os
import time
from pathlib import Path

import pytest
import torch

from mage.ablations import EvalConfig, EvalData, evaluate
from mage.pipeline.checkpoint import load_checkpoint
from mage.pipeline.config import RunConfig
from mage.pipeline.train import load_model, load_tokenizer, train_mage, train_tokenizer

torch.set_num_threads(1)

# desk acceptance profile, same as configs/desk.cfg (library defaults are the larger desk config)
PROFILE = {
    "seed": 0,
    "augmentation": "none",
    "data.train_size": 2000,
    "data.test_size": 500,
    "tokenizer.epochs": 10,
    "model.width": 64,
    "model.dec_width": 64,
    "model.enc_depth": 4,
    "model.dec_depth": 2,
    "model.dropout": 0.0,
    "optim.base_lr": 6e-3,
    "train.epochs": 100,
    "train.cache_tokens": True,
    "probe.epochs": 30,
    "probe.batch_size": 128,
    "probe.warmup_epochs": 3,
}
PROBE_SEEDS = 3
GEN_COUNT = 500

_REPORT: list[str] = []


def record(criterion: str, ok: bool, detail: str):
    _REPORT.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


def _root(tmp_path_factory) -> Path:
    env = os.environ.get("MAGE_ACCEPT_DIR")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("acceptance")


def _cached(out: Path, name: str, cfg: RunConfig, train):
    """Reuse ``out/name`` only if it was written with exactly ``cfg``."""
    path = out / name
    if path.exists() and load_checkpoint(path).meta["config"] == cfg.to_json():
        return path
    return train()


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk tokenizer trained once per session; MAGE variants via :func:`trained`.

    Set ``MAGE_ACCEPT_DIR`` to keep (and reuse) checkpoints between sessions.
    """
    root = _root(tmp_path_factory)
    base = RunConfig(PROFILE, out_dir=str(root / "tokenizer"))
    t0 = time.perf_counter()
    tok_path = _cached(root / "tokenizer", "tokenizer.ckpt", base, lambda: train_tokenizer(base).checkpoint)
    tok = load_tokenizer(tok_path)
    cfg = base.copy(**{"tokenizer.checkpoint": str(tok_path)})
    return {"root": root, "cfg": cfg, "tok": tok, "tok_seconds": time.perf_counter() - t0, "runs": {}}


def trained(desk, name: str, **overrides):
    """Train (once per session) and evaluate a MAGE variant."""
    if name in desk["runs"]:
        return desk["runs"][name]
    cfg = desk["cfg"].copy(**overrides, out_dir=str(desk["root"] / name))
    t0 = time.perf_counter()
    path = _cached(desk["root"] / name, "mage.ckpt", cfg, lambda: train_mage(cfg, tokenizer=desk["tok"]).checkpoint)
    model, tok, _ = load_model(path)
    seconds = time.perf_counter() - t0
    ecfg = EvalConfig.from_run(cfg, probe_seeds=PROBE_SEEDS, gen_count=GEN_COUNT if name == "main" else 0)
    t0 = time.perf_counter()
    data = EvalData(cfg, tok, model)
    metrics = evaluate(model, tok, cfg, ecfg, data)
    run = {"cfg": cfg, "path": path, "model": model, "tok": tok, "data": data, "ecfg": ecfg,
           "seconds": seconds, "eval_seconds": time.perf_counter() - t0, "metrics": metrics}
    desk["runs"][name] = run
    return run
