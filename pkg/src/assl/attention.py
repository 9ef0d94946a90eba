"""Convolutional block attention: channel gate followed by spatial gate."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class CbamSpec:
    reduction: int = 16
    kernel_size: int = 7
    placement: str | None = None  # tap point name; None = after the last stage

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError("CBAM reduction ratio must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("CBAM spatial kernel must be odd")


def channel_attention(fmap: torch.Tensor, fc1: torch.Tensor, fc2: torch.Tensor) -> torch.Tensor:
    """Gate of shape Nx C x1x1 from a shared bias-free MLP over avg- and max-pooled maps.

    ``fc1`` is (C//r)xC and ``fc2`` is Cx(C//r), i.e. ``nn.Linear`` weight layout.
    """
    avg = fmap.mean(dim=(2, 3))
    mx = fmap.amax(dim=(2, 3))

    def mlp(v):
        return F.linear(F.relu(F.linear(v, fc1)), fc2)

    return torch.sigmoid(mlp(avg) + mlp(mx))[:, :, None, None]


def spatial_attention(fmap: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Gate of shape Nx1xHxW from a kxk conv over the channel-mean and channel-max maps."""
    pooled = torch.cat([fmap.mean(dim=1, keepdim=True), fmap.amax(dim=1, keepdim=True)], dim=1)
    k = weight.shape[-1]
    return torch.sigmoid(F.conv2d(pooled, weight, bias, padding=k // 2))


class ChannelGate(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, channels, bias=False)

    def forward(self, x):
        return channel_attention(x, self.fc1.weight, self.fc2.weight)


class SpatialGate(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def forward(self, x):
        return spatial_attention(x, self.conv.weight, self.conv.bias)


class CBAM(nn.Module):
    def __init__(self, channels: int, spec: CbamSpec | None = None):
        super().__init__()
        spec = spec or CbamSpec()
        self.channels = channels
        self.channel = ChannelGate(channels, spec.reduction)
        self.spatial = SpatialGate(spec.kernel_size)

    def forward(self, x):
        x = self.channel(x) * x
        return self.spatial(x) * x

    def extra_repr(self) -> str:
        return f"channels={self.channels}"


def apply_cbam(fmap: torch.Tensor, spec: CbamSpec, params: CBAM | dict) -> torch.Tensor:
    """Functional CBAM; ``params`` is a ``CBAM`` module or a dict with its state-dict names."""
    if isinstance(params, nn.Module):
        return params(fmap)
    x = channel_attention(fmap, params["channel.fc1.weight"], params["channel.fc2.weight"]) * fmap
    return spatial_attention(x, params["spatial.conv.weight"], params.get("spatial.conv.bias")) * x


def cbam_param_count(channels: int, reduction: int = 16, kernel_size: int = 7) -> int:
    hidden = max(1, channels // reduction)
    return 2 * channels * hidden + 2 * kernel_size * kernel_size + 1
