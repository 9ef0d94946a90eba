import dataclasses
import json
import struct

import numpy as np
import pytest
import torch

from assl.backbones import BackboneSpec
from assl.config import RunConfig
from assl.data import synth_roof_sample
from assl.optim import OptimConfig, ScheduleConfig, warmup_cosine_lr
from assl.ssl_methods import SslConfig
from assl.trainer import (MAGIC, Checkpoint, CheckpointError, TrainingDiverged, TrainLog,
                          UnsupportedVersionError, extractor_from_checkpoint, load_checkpoint,
                          read_checkpoint, restore_model, run_pretraining, save_checkpoint)

SPEC = BackboneSpec("effnet-b0", with_cbam=True, resolution=32)
SSL = SslConfig("simclr", proj_hidden=32, proj_out=16, epochs=2, batch_size=8)
OPT = OptimConfig("lars", base_lr=0.3)
SCHED = ScheduleConfig(base_lr=0.3 * 8 / 256, warmup_epochs=1, total_epochs=2)


@pytest.fixture(scope="module")
def images():
    return np.stack([synth_roof_sample(i % 4, 32, i).pixels for i in range(16)])


@pytest.fixture(scope="module")
def trained(images, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    ckpt, log = run_pretraining(images, SPEC, SSL, OPT, SCHED, seed=1, out_dir=out, save_every=1)
    return ckpt, log, out


def test_run_writes_artifacts(trained):
    ckpt, log, out = trained
    assert (out / "checkpoint.ckpt").is_file() and (out / "config.json").is_file()
    assert (out / "checkpoint_epoch0001.ckpt").is_file()
    assert len(log.records) == 2 and len(TrainLog.read(out / "train_log.jsonl").records) == 2
    assert ckpt.epoch == 2 and ckpt.loss_history == log.losses
    assert RunConfig.load(out / "config.json").to_dict() == ckpt.config


def test_applied_lr_matches_schedule(trained):
    ckpt, log, _ = trained
    sched = ckpt.run_config.schedule
    assert sched.steps_per_epoch == 2
    assert log.lr_trace == [warmup_cosine_lr(s, sched) for s in range(4)]


def test_epochs_zero_returns_initialization(images):
    ssl0 = dataclasses.replace(SSL, epochs=0)
    a, log = run_pretraining(images, SPEC, ssl0, OPT, SCHED, seed=4)
    b, _ = run_pretraining(images, SPEC, ssl0, OPT, SCHED, seed=4)
    assert log.records == [] and a.epoch == 0
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)


def test_same_seed_runs_agree(images, trained):
    _, log, _ = trained
    _, again = run_pretraining(images, SPEC, SSL, OPT, SCHED, seed=1)
    assert np.max(np.abs(np.array(log.losses) - np.array(again.losses))) <= 1e-6


def test_worker_count_does_not_change_results(images):
    ssl1 = dataclasses.replace(SSL, epochs=1)
    a, la = run_pretraining(images, SPEC, ssl1, OPT, SCHED, seed=2, num_workers=1)
    b, lb = run_pretraining(images, SPEC, ssl1, OPT, SCHED, seed=2, num_workers=2)
    assert la.losses == lb.losses


def test_non_finite_loss_aborts(images, monkeypatch):
    from assl import ssl_methods

    def bad_loss(self, v1, v2):
        return self.backbone(v1).sum() * float("nan")

    monkeypatch.setattr(ssl_methods.SimCLR, "loss", bad_loss)
    with pytest.raises(TrainingDiverged) as err:
        run_pretraining(images, SPEC, SSL, OPT, SCHED, seed=0)
    assert err.value.step == 0


def test_rejects_empty_or_small_dataset(images):
    with pytest.raises(ValueError):
        run_pretraining(images[:0], SPEC, SSL, OPT, SCHED)
    with pytest.raises(ValueError):
        run_pretraining(images[:4], SPEC, SSL, OPT, SCHED)


# -- checkpoint format -------------------------------------------------------

def test_roundtrip_bit_exact(trained, tmp_path):
    ckpt, _, _ = trained
    path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    assert back.config == ckpt.config and back.epoch == ckpt.epoch and back.loss_history == ckpt.loss_history
    assert set(back.arrays) == set(ckpt.arrays)
    for k, v in ckpt.arrays.items():
        assert back.arrays[k].dtype == v.dtype and back.arrays[k].tobytes() == v.tobytes()
    assert RunConfig.from_dict(back.config).to_dict() == ckpt.config


def test_header_layout(trained, tmp_path):
    ckpt, _, _ = trained
    data = save_checkpoint(ckpt, tmp_path / "a.ckpt").read_bytes()
    assert data[:4] == MAGIC and data[4] == 1
    (hlen,) = struct.unpack("<Q", data[5:13])
    header = json.loads(data[13:13 + hlen])
    meta = header["backbone.stem.conv.weight"]
    assert meta["dtype"] == "f32" and meta["shape"] == [32, 3, 3, 3]
    raw = np.frombuffer(data[13 + hlen + meta["offset"]:][:meta["nbytes"]], "<f4").reshape(meta["shape"])
    assert np.array_equal(raw, ckpt.arrays["backbone.stem.conv.weight"])
    assert {"config", "epoch", "loss_history"} <= set(header)


def test_f64_arrays_roundtrip(tmp_path):
    ck = Checkpoint({"x": 1}, 0, {"a": np.arange(6, dtype=np.float64).reshape(2, 3) / 7,
                                  "b": np.ones(3, np.float32)})
    back = read_checkpoint(save_checkpoint(ck, tmp_path / "c.ckpt"))
    assert back.arrays["a"].dtype == np.float64 and back.arrays["a"].tobytes() == ck.arrays["a"].tobytes()


@pytest.mark.parametrize("cut,section", [(2, "magic"), (4, "version"), (9, "header length"),
                                         (20, "header section"), (-5, "payload")])
def test_truncation_names_section(trained, tmp_path, cut, section):
    ckpt, _, _ = trained
    data = save_checkpoint(ckpt, tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:cut])
    with pytest.raises(CheckpointError, match=section):
        read_checkpoint(tmp_path / "t.ckpt")


def test_version_mismatch(trained, tmp_path):
    ckpt, _, _ = trained
    data = bytearray(save_checkpoint(ckpt, tmp_path / "a.ckpt").read_bytes())
    data[4] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(data))
    with pytest.raises(UnsupportedVersionError, match="version 9"):
        read_checkpoint(tmp_path / "v.ckpt")


def test_wrong_family_and_cbam_toggle(trained, tmp_path):
    ckpt, _, _ = trained
    path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError, match="backbone.stem"):
        load_checkpoint(path, BackboneSpec("resnet34", resolution=32))
    with pytest.raises(CheckpointError, match="cbam"):
        load_checkpoint(path, BackboneSpec("effnet-b0", with_cbam=False, resolution=32))
    with pytest.raises(CheckpointError, match="lacks parameter 'backbone.stage1.block1"):
        load_checkpoint(path, BackboneSpec("effnet-b1", with_cbam=True, resolution=32))


def test_resume_zero_epochs_is_identity(trained, images):
    ckpt, _, _ = trained
    again, log = run_pretraining(images, SPEC, SSL, OPT, SCHED, seed=1, init=ckpt)
    drop = lambda c: {k: v for k, v in c.items() if k not in ("out", "save_every")}
    assert log.records == [] and again.epoch == ckpt.epoch and drop(again.config) == drop(ckpt.config)
    assert all(again.arrays[k].tobytes() == v.tobytes() for k, v in ckpt.arrays.items())


def test_restore_models(trained):
    ckpt, _, _ = trained
    ext = extractor_from_checkpoint(ckpt)
    assert not ext.training
    assert torch.equal(ext.stem.conv.weight, torch.from_numpy(ckpt.arrays["backbone.stem.conv.weight"]))
    model = restore_model(ckpt)
    assert torch.equal(model.head.fc2.weight, torch.from_numpy(ckpt.arrays["head.fc2.weight"]))
