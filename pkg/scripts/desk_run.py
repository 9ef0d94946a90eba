"""Desk-scale end-to-end run on synthetic roofs.

SimCLR pretraining of effnet-b0 + CBAM, then linear evaluation of the
pretrained backbone and of a randomly initialised one (BN statistics
re-estimated on the training images) under the identical protocol.

    python scripts/desk_run.py --out runs/desk [--config configs/desk_simclr.json]
"""
import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

import torch

from assl.backbones import build_backbone
from assl.config import RunConfig
from assl.data import write_synthetic_dataset
from assl.evalkit import linear_eval, recalibrate_batchnorm
from assl.trainer import extractor_from_checkpoint, run_pretraining

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_simclr.json"
N_TRAIN, N_VAL, SIZE = 512, 128, 64


def load_config(path=CONFIG) -> RunConfig:
    return RunConfig.load(path)


def generate_dataset(root, seed=0):
    return write_synthetic_dataset(root, N_TRAIN, N_VAL, SIZE, seed=seed)


def pretrain(train, epochs=None, cfg=None, out_dir=None):
    cfg = cfg or load_config()
    ssl = cfg.ssl if epochs is None else dataclasses.replace(cfg.ssl, epochs=epochs)
    sched = dataclasses.replace(cfg.schedule, base_lr=cfg.optim.lr_for_batch(ssl.batch_size))
    return run_pretraining(train, cfg.backbone, ssl, cfg.optim, sched, cfg.seed, recipe=cfg.recipe,
                           normalization=cfg.normalization, out_dir=out_dir, num_workers=1)


def random_backbone(train, cfg):
    torch.manual_seed(cfg.seed)
    return recalibrate_batchnorm(build_backbone(cfg.backbone), train.load_all(), norm=cfg.normalization)


def run(train, val, out_dir, cfg=None) -> dict:
    cfg = cfg or load_config()
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    ckpt, log = pretrain(train, cfg=cfg, out_dir=out_dir / "pretrain")
    t1 = time.perf_counter()
    pre = linear_eval(extractor_from_checkpoint(ckpt), train, val, cfg.linear_eval, cfg.normalization)
    base = linear_eval(random_backbone(train, cfg), train, val, cfg.linear_eval, cfg.normalization)
    result = {
        "pretrained": {"mean": pre["mean"], "std": pre["std"], "accuracies": pre["accuracies"]},
        "random_init": {"mean": base["mean"], "std": base["std"], "accuracies": base["accuracies"]},
        "loss_first": log.losses[0], "loss_last": log.losses[-1],
        "pretrain_seconds": t1 - t0, "total_seconds": time.perf_counter() - t0,
    }
    (out_dir / "result.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return result


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=str(CONFIG))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config)
    out = Path(args.out)
    train, val = generate_dataset(out / "data", cfg.seed)
    result = run(train, val, out, cfg)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
