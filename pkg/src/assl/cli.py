"""Command-line entry point: ``assl {synth,pretrain,linear-eval,predict,cam,profile}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Logs go to stderr,
artifacts to files.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .backbones import FAMILIES, BackboneSpec, build_backbone
from .config import ConfigError, LinearEvalConfig, RunConfig, from_dict
from .data import (IMAGE_SUFFIXES, RoofClass, load_manifest, read_image, scan_image_folder,
                   write_synthetic_dataset)
from .ssl_methods import METHODS

log = logging.getLogger("assl")


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _dataset(path: str, layout: str):
    p = Path(path)
    if p.is_dir():
        return scan_image_folder(p, layout)
    return load_manifest(p)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    train, val = write_synthetic_dataset(args.out, args.n_train, args.n_val, args.size, args.seed)
    log.info("wrote %d train / %d val images to %s", len(train), len(val), args.out)
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import run_pretraining

    cfg = _load_config(args.config)
    if args.method is not None:
        cfg.ssl = dataclasses.replace(cfg.ssl, method=args.method)
    if args.backbone is not None:
        cfg.backbone = dataclasses.replace(cfg.backbone, family=args.backbone)
    if args.cbam is not None:
        cfg.backbone = dataclasses.replace(cfg.backbone, with_cbam=args.cbam)
    if args.resolution is not None:
        cfg.backbone = dataclasses.replace(cfg.backbone, resolution=args.resolution)
    if args.epochs is not None:
        cfg.ssl = dataclasses.replace(cfg.ssl, epochs=args.epochs)
    if args.batch_size is not None:
        cfg.ssl = dataclasses.replace(cfg.ssl, batch_size=args.batch_size)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.data is not None:
        cfg.data.pretrain = args.data
    if args.out is not None:
        cfg.out = args.out
    if not cfg.data.pretrain:
        raise UsageError("no pretraining data: pass --data or set data.pretrain in the config")

    dataset = _dataset(cfg.data.pretrain, cfg.data.layout)
    sched = dataclasses.replace(cfg.schedule, base_lr=cfg.optim.lr_for_batch(cfg.ssl.batch_size))
    ckpt, trainlog = run_pretraining(dataset, cfg.backbone, cfg.ssl, cfg.optim, sched, cfg.seed,
                                     recipe=cfg.recipe, normalization=cfg.normalization, out_dir=cfg.out,
                                     save_every=cfg.save_every, data_paths=cfg.data)
    log.info("checkpoint written to %s", Path(cfg.out) / "checkpoint.ckpt")
    return 0


def _linear_eval_config(args, cfg: RunConfig) -> LinearEvalConfig:
    le = cfg.linear_eval
    if args.epochs is not None:
        le = dataclasses.replace(le, epochs=args.epochs,
                                 schedule=dataclasses.replace(le.schedule, total_epochs=max(args.epochs, 1)))
    if args.seeds is not None:
        le = dataclasses.replace(le, seeds=list(args.seeds))
    return le


def cmd_linear_eval(args) -> int:
    from .evalkit import linear_eval, recalibrate_batchnorm, train_linear_head
    from .trainer import extractor_from_checkpoint, load_checkpoint

    cfg = _load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    snapshot = ckpt.run_config
    cfg.normalization = snapshot.normalization if args.config is None else cfg.normalization
    le = _linear_eval_config(args, cfg)
    train = load_manifest(args.train_manifest, "train")
    val = load_manifest(args.val_manifest, "val")
    if args.random_init:
        torch.manual_seed(snapshot.seed)
        extractor = build_backbone(ckpt.backbone_spec)
        recalibrate_batchnorm(extractor, train.load_all(), norm=cfg.normalization)
    else:
        extractor = extractor_from_checkpoint(ckpt)
    result = linear_eval(extractor, train, val, le, cfg.normalization)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    resolved = dataclasses.replace(snapshot, linear_eval=le, normalization=cfg.normalization)
    resolved.data.train_manifest, resolved.data.val_manifest = args.train_manifest, args.val_manifest
    resolved.save(out / "config.json")
    # persist the first seed's head for predict/cam
    head = train_linear_head(extractor, (train.load_all(), train.labels()), le, le.seeds[0], norm=cfg.normalization)
    np.savez(out / "head.npz", weight=head.weight.detach().numpy(), bias=head.bias.detach().numpy(),
             random_init=bool(args.random_init))
    log.info("top-1 %.4f +- %s over seeds %s", result["mean"], result["std"], le.seeds)
    return 0


def _load_head(path: str, extractor):
    from .evalkit import LinearHead

    data = np.load(path)
    weight = torch.from_numpy(data["weight"])
    if weight.shape[1] != extractor.embed_dim:
        raise ValueError(f"head weight expects embedding dimension {weight.shape[1]}, "
                         f"backbone provides {extractor.embed_dim}")
    head = LinearHead(extractor.embed_dim)
    with torch.no_grad():
        head.weight.copy_(weight)
        head.bias.copy_(torch.from_numpy(data["bias"]))
    return head.to(next(extractor.parameters()).dtype)


def _image_paths(items: list[str]) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            paths.append(p)
    return paths


def cmd_predict(args) -> int:
    from .evalkit import predict
    from .trainer import extractor_from_checkpoint, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    extractor = extractor_from_checkpoint(ckpt)
    head = _load_head(args.head, extractor)
    paths = _image_paths(args.images)
    preds = predict(extractor, head, [str(p) for p in paths], norm=ckpt.run_config.normalization)
    lines = []
    for path, pred in zip(paths, preds):
        rec = {"path": str(path)}
        if pred.error:
            rec["error"] = pred.error
        else:
            rec["category"] = pred.category.label
            rec["probabilities"] = [float(x) for x in pred.probabilities]
        lines.append(json.dumps(rec))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 1 if any(p.error for p in preds) and args.strict else 0


def cmd_cam(args) -> int:
    from .evalkit import preprocess
    from .interpret import grad_cam, save_overlay
    from .trainer import extractor_from_checkpoint, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    extractor = extractor_from_checkpoint(ckpt)
    head = _load_head(args.head, extractor)
    norm = ckpt.run_config.normalization
    pixels = read_image(args.image)
    res = extractor.spec.input_resolution
    if args.target is None:
        from .evalkit import predict
        target = predict(extractor, head, [pixels], norm=norm)[0].category
    else:
        target = RoofClass.parse(args.target)
    cam = grad_cam(extractor, head, preprocess(pixels, res, norm), target, args.layer)
    # heatmap lives at model resolution; render it over the image resized to match
    from PIL import Image
    if pixels.shape[:2] != cam.values.shape:
        pixels = np.asarray(Image.fromarray(pixels).resize(cam.values.shape[::-1], Image.BILINEAR))
    save_overlay(cam, pixels, args.out, args.alpha)
    log.info("wrote %s (target %s, degenerate=%s)", args.out, target.label, cam.degenerate)
    return 0


def cmd_profile(args) -> int:
    from .profiler import profile

    spec = BackboneSpec(args.backbone, with_cbam=args.cbam)
    report = profile(spec, args.resolution, args.batch_size, args.iterations, args.micro_batch)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assl", description="Self-supervised roof-type classification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic roof dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-val", type=int, default=128)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--config")
    p.add_argument("--data", help="CSV manifest or image folder")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--backbone", choices=FAMILIES)
    p.add_argument("--cbam", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--resolution", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("linear-eval", help="linear evaluation on a frozen backbone")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--random-init", action="store_true",
                   help="evaluate a randomly initialised backbone of the checkpoint's architecture")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_linear_eval)

    p = sub.add_parser("predict", help="classify images with a trained head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 1 if any image fails")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cam", help="Grad-CAM overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target", help="roof category (default: predicted)")
    p.add_argument("--layer", default="features")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("profile", help="parameter/FLOP counts and iteration timing")
    p.add_argument("--backbone", choices=FAMILIES, required=True)
    p.add_argument("--cbam", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--batch-size", type=int, help="also time training iterations at this batch size")
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"assl: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"assl: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"assl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
