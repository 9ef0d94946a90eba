"""Grad-CAM heatmaps over a backbone tap point and colour overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .backbones import FeatureExtractor
from .data import ImageRecord, RoofClass


@dataclass
class CamHeatmap:
    values: np.ndarray  # HxW in [0, 1]
    layer: str
    target: RoofClass
    degenerate: bool = False

    def sidecar(self) -> dict:
        return {"layer": self.layer, "target": self.target.label, "degenerate": self.degenerate}


def grad_cam(extractor: FeatureExtractor, head: nn.Module, image: torch.Tensor | np.ndarray,
             target: RoofClass | int, layer: str = "features") -> CamHeatmap:
    """Grad-CAM for one normalized 3xHxW image (or a 1x3xHxW batch).

    Channel weights are the spatially averaged gradients of the target logit
    with respect to the ``layer`` map; the ReLU of the weighted channel sum is
    bilinearly upsampled to the input size and min-max normalized.
    """
    target = RoofClass(target)
    dtype = next(extractor.parameters()).dtype
    x = torch.as_tensor(np.asarray(image) if isinstance(image, np.ndarray) else image).to(dtype)
    if x.ndim == 3:
        x = x[None]
    x = x.detach().clone().requires_grad_(True)  # keeps a graph even for a frozen backbone
    extractor.eval()
    with torch.enable_grad():
        taps = extractor.forward_maps(x)
        fmap = taps[layer]
        logits = head(extractor.embed(taps["features"]))
        if logits.shape[-1] <= int(target):
            raise ValueError("head has no output for the target category")
        grad, = torch.autograd.grad(logits[0, int(target)], fmap, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(fmap)
    weights = grad[0].mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * fmap[0].detach()).sum(0))
    cam = F.interpolate(cam[None, None], size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = cam.double().numpy()
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return CamHeatmap(np.zeros_like(cam), layer, target, degenerate=True)
    return CamHeatmap((cam - lo) / (hi - lo), layer, target)


def jet(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear jet colormap: [0, 1] -> RGB floats in [0, 1]."""
    v = np.clip(values, 0, 1)[..., None]
    centres = np.array([0.75, 0.5, 0.25])  # red, green, blue peaks
    return np.clip(1.5 - np.abs(4 * v - 4 * centres), 0, 1)


def render_overlay(heatmap: CamHeatmap, image: ImageRecord | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the jet-coloured heatmap onto an 8-bit RGB image; returns HxWx3 uint8."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    pixels = image.pixels if isinstance(image, ImageRecord) else image
    if pixels.shape[:2] != heatmap.values.shape:
        raise ValueError(f"heatmap {heatmap.values.shape} does not match image {pixels.shape[:2]}")
    blend = (1 - alpha) * pixels.astype(np.float64) + alpha * 255.0 * jet(heatmap.values)
    return np.floor(blend + 0.5).clip(0, 255).astype(np.uint8)


def save_overlay(heatmap: CamHeatmap, image: ImageRecord | np.ndarray, path: str | Path,
                 alpha: float = 0.5) -> Path:
    """Write the overlay PNG plus a ``.json`` sidecar with layer, target and degenerate flag."""
    path = Path(path)
    Image.fromarray(render_overlay(heatmap, image, alpha)).save(path)
    path.with_suffix(".json").write_text(json.dumps(heatmap.sidecar()) + "\n", encoding="utf-8")
    return path
