"""Pretraining loop, checkpoint format and per-epoch logging.

Checkpoint layout (little-endian):

    b"ASSL" | u8 version | u64 header length | UTF-8 JSON header | array payloads

The header maps every array name to ``{dtype, shape, offset, nbytes}`` (offsets
relative to the first payload byte) and also carries ``config``, ``epoch`` and
``loss_history``.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import BackboneSpec, FeatureExtractor, build_backbone
from .config import DataPaths, Normalization, RunConfig, from_dict
from .data import AugmentRecipe, DatasetManifest, batch_views, derive_sample_seed  # noqa: F401
from .optim import OptimConfig, ScheduleConfig, build_optimizer, set_lr, warmup_cosine_lr
from .ssl_methods import SslConfig, SslModel, build_ssl_model

log = logging.getLogger(__name__)

MAGIC = b"ASSL"
VERSION = 1
RESERVED_KEYS = ("config", "epoch", "loss_history")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    arrays: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)
    version: int = VERSION

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    @property
    def backbone_spec(self) -> BackboneSpec:
        return from_dict(BackboneSpec, self.config["backbone"], "config.backbone")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["mean_loss"] for r in self.records]

    @property
    def lr_trace(self) -> list[float]:
        return [lr for r in self.records for lr in r["lr"]]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# persistence


def _dtype_tag(arr: np.ndarray) -> str:
    return "f64" if arr.dtype == np.float64 else "f32"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    header: dict = {"config": ckpt.config, "epoch": ckpt.epoch, "loss_history": list(ckpt.loss_history)}
    blobs = []
    offset = 0
    for name, arr in ckpt.arrays.items():
        if name in RESERVED_KEYS:
            raise CheckpointError(f"array name {name!r} is reserved")
        tag = _dtype_tag(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        header[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps(header).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<BQ", ckpt.version, len(head)) + head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Parse a checkpoint file without validating it against a backbone."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CheckpointError(f"{path}: truncated file, missing magic bytes")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(data) < 5:
        raise CheckpointError(f"{path}: truncated file, missing version byte")
    version = data[4]
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < 13:
        raise CheckpointError(f"{path}: truncated file, missing header length")
    (hlen,) = struct.unpack("<Q", data[5:13])
    if len(data) < 13 + hlen:
        raise CheckpointError(f"{path}: truncated file, missing header section")
    try:
        header = json.loads(data[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header section: {exc}") from exc
    for key in RESERVED_KEYS:
        if key not in header:
            raise CheckpointError(f"{path}: header lacks the {key!r} section")
    payload = memoryview(data)[13 + hlen:]
    arrays = {}
    for name, meta in header.items():
        if name in RESERVED_KEYS:
            continue
        start, nbytes = meta["offset"], meta["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated file, missing payload for array {name!r}")
        dtype = _DTYPES[meta["dtype"]]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype).reshape(meta["shape"]).copy()
        arrays[name] = arr.astype(dtype.newbyteorder("="), copy=False)
    return Checkpoint(header["config"], int(header["epoch"]), arrays, list(header["loss_history"]), version)


def validate_backbone_arrays(ckpt: Checkpoint, spec: BackboneSpec, prefix: str = "backbone.") -> None:
    with torch.device("meta"):
        ref = build_backbone(spec)
    expected = {prefix + k: tuple(v.shape) for k, v in ref.state_dict().items()}
    for name, shape in expected.items():
        if name not in ckpt.arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r} required by {spec.family}")
        if tuple(ckpt.arrays[name].shape) != shape:
            raise CheckpointError(f"shape mismatch for parameter {name!r}: checkpoint "
                                  f"{tuple(ckpt.arrays[name].shape)} vs {spec.family} {shape}")
    unclaimed = [n for n in ckpt.arrays if n.startswith(prefix) and n not in expected]
    if unclaimed:
        raise CheckpointError(f"checkpoint parameter {unclaimed[0]!r} is not claimed by the {spec.family} "
                              f"backbone (with_cbam={spec.with_cbam})")


def load_checkpoint(path: str | Path, backbone_spec: BackboneSpec | None = None) -> Checkpoint:
    """Read and validate a checkpoint against its embedded spec (or ``backbone_spec`` if given)."""
    ckpt = read_checkpoint(path)
    validate_backbone_arrays(ckpt, backbone_spec or ckpt.backbone_spec)
    return ckpt


def _state_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        out[name] = arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64)
    return out


def _load_state(model: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = model.state_dict()
    new = {}
    for name, ref in state.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for parameter {key!r}: {arr.shape} vs {tuple(ref.shape)}")
        new[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(new)


def extractor_from_checkpoint(ckpt: Checkpoint, spec: BackboneSpec | None = None) -> FeatureExtractor:
    spec = spec or ckpt.backbone_spec
    validate_backbone_arrays(ckpt, spec)
    model = build_backbone(spec)
    dtype = next(iter(ckpt.arrays.values())).dtype
    model = model.to(torch.float64 if dtype == np.float64 else torch.float32)
    _load_state(model, ckpt.arrays, "backbone.")
    return model.eval()


def restore_model(ckpt: Checkpoint) -> SslModel:
    cfg = ckpt.run_config
    model = build_ssl_model(build_backbone(cfg.backbone), cfg.ssl)
    dtype = next(iter(ckpt.arrays.values())).dtype
    model = model.to(torch.float64 if dtype == np.float64 else torch.float32)
    _load_state(model, ckpt.arrays)
    return model


# ---------------------------------------------------------------------------
# training


_WORKER_IMAGES: np.ndarray | None = None


def _init_worker(images):
    global _WORKER_IMAGES
    _WORKER_IMAGES = images


def _worker_views(args):
    return batch_views(_WORKER_IMAGES, *args)


def num_workers_from_env() -> int:
    return max(1, int(os.environ.get("ASSL_NUM_WORKERS", "1")))


def _load_images(manifest: DatasetManifest, resolution: int) -> np.ndarray:
    try:
        return manifest.load_all()
    except ValueError:
        log.info("images differ in size; resizing to %d on load", resolution)
        return manifest.load_all(size=resolution)


def run_pretraining(dataset: DatasetManifest | np.ndarray, spec: BackboneSpec, ssl: SslConfig,
                    optim: OptimConfig, sched: ScheduleConfig, seed: int = 0, *,
                    recipe: AugmentRecipe | None = None, normalization: Normalization | None = None,
                    out_dir: str | Path | None = None, save_every: int = 10, init: Checkpoint | None = None,
                    num_workers: int | None = None, dtype: torch.dtype = torch.float32,
                    data_paths: DataPaths | None = None) -> tuple[Checkpoint, TrainLog]:
    """Self-supervised pretraining for ``ssl.epochs`` epochs; labels are ignored.

    The schedule's length and steps per epoch are derived from ``ssl.epochs`` and
    the dataset size (the last incomplete batch is dropped).
    """
    recipe = recipe or AugmentRecipe()
    normalization = normalization or Normalization()
    images = _load_images(dataset, spec.input_resolution) if isinstance(dataset, DatasetManifest) else dataset
    n = len(images)
    if n == 0:
        raise ValueError("pretraining dataset is empty")
    batch = ssl.batch_size
    steps_per_epoch = n // batch
    if steps_per_epoch == 0:
        raise ValueError(f"batch size {batch} exceeds dataset size {n}")
    epochs = ssl.epochs
    warmup = sched.warmup_epochs
    if warmup >= max(epochs, 1):
        warmup = max(0, epochs - 1)
        log.warning("warmup shortened to %d epochs for a %d-epoch run", warmup, epochs)
    sched = dataclasses.replace(sched, total_epochs=max(epochs, 1), warmup_epochs=warmup,
                                steps_per_epoch=steps_per_epoch)
    total_steps = epochs * steps_per_epoch

    torch.manual_seed(seed)
    model = build_ssl_model(build_backbone(spec), ssl).to(dtype)
    start_epoch, history = 0, []
    if init is not None:
        _load_state(model, init.arrays)
        start_epoch, history = init.epoch, list(init.loss_history)
    model.train()
    opt = build_optimizer(model, optim, sched.base_lr)

    config = RunConfig(backbone=spec, ssl=ssl, optim=optim, schedule=sched, recipe=recipe,
                       normalization=normalization, seed=seed, save_every=save_every,
                       data=data_paths or DataPaths(),
                       out=str(out_dir) if out_dir is not None else "").to_dict()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0:
            (out_dir / "train_log.jsonl").write_text("", encoding="utf-8")

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(config, epoch, _state_arrays(model), list(history))

    workers = num_workers or num_workers_from_env()
    pool = ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(images,)) if workers > 1 else None
    res = spec.input_resolution
    trainlog = TrainLog()
    try:
        for epoch in range(start_epoch, epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, 2**31))).permutation(n)
            losses, lrs = [], []
            for b in range(steps_per_epoch):
                step = epoch * steps_per_epoch + b
                idx = order[b * batch:(b + 1) * batch]
                args = (epoch, seed, recipe, (res, res), normalization.mean, normalization.std)
                if pool is None:
                    v1, v2 = batch_views(images, idx, *args)
                else:
                    parts = list(pool.map(_worker_views, [(chunk, *args) for chunk in np.array_split(idx, workers)]))
                    v1 = np.concatenate([p[0] for p in parts])
                    v2 = np.concatenate([p[1] for p in parts])
                lr = warmup_cosine_lr(step, sched)
                set_lr(opt, lr)
                opt.zero_grad(set_to_none=True)
                loss = model.loss(torch.from_numpy(v1).to(dtype), torch.from_numpy(v2).to(dtype))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(step, value)
                loss.backward()
                opt.step()
                model.after_step(step + 1, total_steps)
                losses.append(value)
                lrs.append(lr)
            mean_loss = float(np.mean(losses))
            history.append(mean_loss)
            record = {"epoch": epoch + 1, "mean_loss": mean_loss, "lr": lrs,
                      "seconds": time.perf_counter() - t0}
            trainlog.records.append(record)
            log.info("epoch %d/%d loss %.4f lr %.4g (%.1fs)", epoch + 1, epochs, mean_loss, lrs[-1],
                     record["seconds"])
            if out_dir is not None:
                with open(out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record) + "\n")
                if save_every and (epoch + 1) % save_every == 0 and epoch + 1 < epochs:
                    save_checkpoint(snapshot(epoch + 1), out_dir / f"checkpoint_epoch{epoch + 1:04d}.ckpt")
    finally:
        if pool is not None:
            pool.shutdown()

    ckpt = snapshot(max(epochs, start_epoch))
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
        (out_dir / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return ckpt, trainlog
