"""Linear evaluation on a frozen backbone and accuracy reporting."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import FeatureExtractor
from .config import LinearEvalConfig, Normalization
from .data import (AugmentRecipe, DatasetManifest, ImageRecord, RoofClass, augment, derive_sample_seed,
                   normalize, resize)
from .optim import build_optimizer, set_lr, warmup_cosine_lr
from .trainer import Checkpoint, extractor_from_checkpoint

log = logging.getLogger(__name__)

N_CLASSES = len(RoofClass)


class LinearHead(nn.Linear):
    def __init__(self, embed_dim: int, n_classes: int = N_CLASSES):
        super().__init__(embed_dim, n_classes)

    @classmethod
    def initialised(cls, embed_dim: int, seed: int, dtype=torch.float32) -> "LinearHead":
        head = cls(embed_dim).to(dtype)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=dtype) * 0.01)
            head.bias.zero_()
        return head


@dataclass
class Prediction:
    category: RoofClass | None
    probabilities: np.ndarray | None
    error: str | None = None


@dataclass
class EvalReport:
    top1: float
    per_class: dict[str, dict]
    confusion: list[list[int]]
    n: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _as_extractor(model: FeatureExtractor | Checkpoint) -> FeatureExtractor:
    return extractor_from_checkpoint(model) if isinstance(model, Checkpoint) else model


def params_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


def preprocess(image: ImageRecord | np.ndarray, resolution: int, norm: Normalization) -> np.ndarray:
    """Resize (no crop) and normalize an HxWx3 uint8 image for evaluation."""
    pixels = image.pixels if isinstance(image, ImageRecord) else image
    return normalize(resize(_to_float(pixels), (resolution, resolution)), norm.mean, norm.std)


@torch.no_grad()
def embed_images(extractor: FeatureExtractor, batch: np.ndarray) -> torch.Tensor:
    dtype = next(extractor.parameters()).dtype
    return extractor(torch.from_numpy(np.ascontiguousarray(batch)).to(dtype))


@torch.no_grad()
def recalibrate_batchnorm(extractor: FeatureExtractor, images: np.ndarray, resolution: int | None = None,
                          norm: Normalization | None = None, batch_size: int = 64) -> FeatureExtractor:
    """Re-estimate BN running statistics from ``images`` (cumulative average); weights untouched.

    A randomly initialised backbone carries placeholder statistics (mean 0, var 1)
    under which its embeddings vanish; this gives it data statistics instead.
    """
    norm = norm or Normalization()
    resolution = resolution or (extractor.spec.input_resolution if extractor.spec else images.shape[1])
    bns = [m for m in extractor.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    extractor.train()
    for i in range(0, len(images), batch_size):
        embed_images(extractor, np.stack([preprocess(im, resolution, norm) for im in images[i:i + batch_size]]))
    for m, mom in zip(bns, saved):
        m.momentum = mom
    return extractor.eval()


def train_linear_head(model: FeatureExtractor | Checkpoint, train: DatasetManifest | tuple[np.ndarray, np.ndarray],
                      cfg: LinearEvalConfig | None = None, seed: int = 0, resolution: int | None = None,
                      norm: Normalization | None = None) -> LinearHead:
    """Fit a linear classifier on frozen backbone embeddings of augmented training images.

    Only random resized crops and horizontal flips are used for augmentation.
    ``train`` is a labeled manifest or an (NxHxWx3 uint8 images, labels) pair.
    """
    cfg = cfg or LinearEvalConfig()
    norm = norm or Normalization()
    extractor = _as_extractor(model)
    if isinstance(train, DatasetManifest):
        if not train.labeled:
            bad = next(i for i, e in enumerate(train.entries) if e.label is None)
            raise ValueError(f"linear evaluation needs labels; entry {bad + 1} ({train.entries[bad].path}) has none")
        images, labels = train.load_all(), train.labels()
    else:
        images, labels = train
    resolution = resolution or (extractor.spec.input_resolution if extractor.spec else images.shape[1])
    extractor.eval()
    frozen = [p.requires_grad for p in extractor.parameters()]
    for p in extractor.parameters():
        p.requires_grad_(False)
    before = params_digest(extractor)

    dtype = next(extractor.parameters()).dtype
    head = LinearHead.initialised(extractor.embed_dim, seed, dtype)
    n = len(images)
    steps = math.ceil(n / cfg.batch_size)
    sched = dataclasses.replace(cfg.schedule, total_epochs=max(cfg.epochs, 1), steps_per_epoch=steps,
                                warmup_epochs=min(cfg.schedule.warmup_epochs, max(cfg.epochs - 1, 0)))
    opt = build_optimizer(head, cfg.optim, sched.base_lr)
    recipe = AugmentRecipe.linear_eval(tuple(cfg.crop_scale))
    y_all = torch.as_tensor(labels, dtype=torch.long)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, 2**31))).permutation(n)
        for b in range(steps):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            views = np.stack([
                normalize(augment(_to_float(images[i]), (resolution, resolution), recipe,
                                  derive_sample_seed(seed, epoch, int(i)).rng()), norm.mean, norm.std)
                for i in idx])
            feats = embed_images(extractor, views)
            set_lr(opt, warmup_cosine_lr(epoch * steps + b, sched))
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(head(feats), y_all[idx])
            loss.backward()
            opt.step()
        log.debug("linear eval epoch %d loss %.4f", epoch + 1, loss.item())

    if params_digest(extractor) != before:
        raise RuntimeError("backbone parameters changed during linear evaluation")
    for p, flag in zip(extractor.parameters(), frozen):
        p.requires_grad_(flag)
    return head


def logits_to_predictions(logits: torch.Tensor) -> list[Prediction]:
    probs = torch.softmax(logits.double(), dim=1).numpy()
    # np.argmax returns the first maximum, i.e. the lowest category code on ties
    return [Prediction(RoofClass(int(np.argmax(p))), p) for p in probs]


@torch.no_grad()
def predict(model: FeatureExtractor | Checkpoint, head: LinearHead,
            images: Sequence[ImageRecord | np.ndarray | str], resolution: int | None = None,
            norm: Normalization | None = None) -> list[Prediction]:
    """Classify images one at a time, so results never depend on batch composition."""
    from .data import read_image

    extractor = _as_extractor(model).eval()
    norm = norm or Normalization()
    out = []
    for item in images:
        try:
            pixels = read_image(item) if isinstance(item, (str, bytes)) or hasattr(item, "__fspath__") else item
            res = resolution or (extractor.spec.input_resolution if extractor.spec else None)
            px = pixels.pixels if isinstance(pixels, ImageRecord) else pixels
            x = preprocess(px, res or px.shape[0], norm)[None]
            out.extend(logits_to_predictions(head(embed_images(extractor, x))))
        except Exception as exc:  # per-item failure, keep going
            log.warning("prediction failed for %s: %s", item if isinstance(item, str) else "<array>", exc)
            out.append(Prediction(None, None, str(exc)))
    return out


def evaluate_report(predictions: Sequence[Prediction | int], truth: Sequence[int], seed: int | None = None) -> EvalReport:
    if len(predictions) != len(truth):
        raise ValueError(f"{len(predictions)} predictions for {len(truth)} labels")
    pred = np.array([int(p.category) if isinstance(p, Prediction) else int(p) for p in predictions], dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    per_class = {}
    for c in RoofClass:
        tp = conf[c, c]
        predicted, actual = conf[:, c].sum(), conf[c, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c.label] = {"precision": float(precision), "recall": float(recall), "f1": float(f1),
                              "support": int(actual), "precision_undefined": bool(predicted == 0)}
    n = int(conf.sum())
    top1 = float(np.trace(conf) / n) if n else 0.0
    return EvalReport(top1, per_class, conf.tolist(), n, seed)


def aggregate_runs(accuracies: Sequence[float]) -> tuple[float, float | None]:
    """Mean and Bessel-corrected std; std is ``None`` (undefined) for fewer than two runs."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if len(acc) == 0:
        raise ValueError("no runs to aggregate")
    mean = float(acc.mean())
    if len(acc) < 2:
        return mean, None
    return mean, float(acc.std(ddof=1))


def linear_eval(model: FeatureExtractor | Checkpoint, train: DatasetManifest, val: DatasetManifest,
                cfg: LinearEvalConfig | None = None, norm: Normalization | None = None,
                resolution: int | None = None) -> dict:
    """Train one head per seed and report per-seed accuracies plus mean and std."""
    cfg = cfg or LinearEvalConfig()
    extractor = _as_extractor(model)
    if not val.labeled:
        raise ValueError("validation manifest must be fully labeled")
    train_data = (train.load_all(), train.labels())
    val_images = val.load_all()
    reports = []
    for seed in cfg.seeds:
        head = train_linear_head(extractor, train_data, cfg, seed, resolution, norm)
        preds = predict(extractor, head, list(val_images), resolution, norm)
        reports.append(evaluate_report(preds, val.labels(), seed))
    mean, std = aggregate_runs([r.top1 for r in reports])
    return {"runs": [r.to_dict() for r in reports], "accuracies": [r.top1 for r in reports],
            "mean": mean, "std": std}
