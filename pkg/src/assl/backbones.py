"""ResNet-34/50 and EfficientNet-B0..B3 feature extractors with optional CBAM.

Parameters follow the ``stage{i}.block{j}.<role>`` naming scheme; that naming is
what checkpoints are keyed on, so keep it stable.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import CBAM, CbamSpec

FAMILIES = ("resnet34", "resnet50", "effnet-b0", "effnet-b1", "effnet-b2", "effnet-b3")

# (width, depth, resolution)
EFFNET_COEFFS = {
    "effnet-b0": (1.0, 1.0, 224),
    "effnet-b1": (1.0, 1.1, 240),
    "effnet-b2": (1.1, 1.2, 260),
    "effnet-b3": (1.2, 1.4, 300),
}

# expand ratio, kernel, stride, in channels, out channels, repeats
EFFNET_B0_STAGES = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
]
EFFNET_STEM = 32
EFFNET_HEAD = 1280

RESNET_LAYOUT = {
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
}

EMBED_DIMS = {
    "resnet34": 512,
    "resnet50": 2048,
    "effnet-b0": 1280,
    "effnet-b1": 1280,
    "effnet-b2": 1408,
    "effnet-b3": 1536,
}


@dataclass
class BackboneSpec:
    family: str = "effnet-b0"
    with_cbam: bool = False
    cbam: CbamSpec = field(default_factory=CbamSpec)
    resolution: int | None = None
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if isinstance(self.cbam, dict):
            self.cbam = CbamSpec(**self.cbam)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        if self.resolution is not None and self.resolution < 32:
            raise ValueError("input resolution must be >= 32")

    @property
    def input_resolution(self) -> int:
        if self.resolution is not None:
            return self.resolution
        return EFFNET_COEFFS[self.family][2] if self.family in EFFNET_COEFFS else 224


def round_filters(channels: int, width: float, divisor: int = 8) -> int:
    c = channels * width
    new = max(divisor, int(c + divisor / 2) // divisor * divisor)
    if new < 0.9 * c:
        new += divisor
    return int(new)


def round_repeats(repeats: int, depth: float) -> int:
    return int(math.ceil(depth * repeats))


class ConvBNAct(nn.Sequential):
    def __init__(self, cin, cout, kernel=1, stride=1, groups=1, act: type[nn.Module] | None = nn.SiLU):
        layers = [("conv", nn.Conv2d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=False)),
                  ("bn", nn.BatchNorm2d(cout, eps=1e-5, momentum=0.1))]
        if act is not None:
            layers.append(("act", act()))
        super().__init__(OrderedDict(layers))


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, squeezed: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.reduce = nn.Conv2d(channels, squeezed, 1)
        self.act = nn.SiLU()
        self.expand = nn.Conv2d(squeezed, channels, 1)
        self.gate = nn.Sigmoid()

    def forward(self, x):
        return x * self.gate(self.expand(self.act(self.reduce(self.pool(x)))))


def _drop_path(x: torch.Tensor, rate: float, training: bool) -> torch.Tensor:
    if not training or rate == 0.0:
        return x
    keep = torch.empty((x.shape[0], 1, 1, 1), dtype=x.dtype, device=x.device).bernoulli_(1 - rate)
    return x * keep / (1 - rate)


class MBConv(nn.Module):
    """Inverted residual: expand 1x1, depthwise kxk, squeeze-excite, project 1x1."""

    def __init__(self, cin: int, cout: int, expansion: float = 6, kernel: int = 3, stride: int = 1,
                 se_ratio: float = 0.25, drop_path: float = 0.0):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("MBConv kernel must be odd")
        if stride not in (1, 2):
            raise ValueError("MBConv stride must be 1 or 2")
        hidden = int(round(cin * expansion))
        self.expand = ConvBNAct(cin, hidden) if expansion != 1 else None
        self.dw = ConvBNAct(hidden, hidden, kernel, stride, groups=hidden)
        self.se = SqueezeExcite(hidden, max(1, int(cin * se_ratio))) if se_ratio > 0 else None
        self.project = ConvBNAct(hidden, cout, act=None)
        self.use_residual = stride == 1 and cin == cout
        self.drop_path = drop_path

    def forward(self, x):
        out = x if self.expand is None else self.expand(x)
        out = self.dw(out)
        if self.se is not None:
            out = self.se(out)
        out = self.project(out)
        if self.use_residual:
            out = _drop_path(out, self.drop_path, self.training) + x
        return out


def mbconv_block(x: torch.Tensor, expansion: float, kernel: int, stride: int, se_ratio: float,
                 out_channels: int) -> torch.Tensor:
    """Run a freshly initialised MBConv block (evaluation mode) on ``x``."""
    block = MBConv(x.shape[1], out_channels, expansion, kernel, stride, se_ratio).to(x.dtype).eval()
    return block(x)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = ConvBNAct(cin, width, 3, stride, act=nn.ReLU)
        self.conv2 = ConvBNAct(width, cout, 3, act=None)
        self.downsample = ConvBNAct(cin, cout, 1, stride, act=None) if stride != 1 or cin != cout else None
        self.act = nn.ReLU()

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        return self.act(self.conv2(self.conv1(x)) + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = ConvBNAct(cin, width, 1, act=nn.ReLU)
        self.conv2 = ConvBNAct(width, width, 3, stride, act=nn.ReLU)
        self.conv3 = ConvBNAct(width, cout, 1, act=None)
        self.downsample = ConvBNAct(cin, cout, 1, stride, act=None) if stride != 1 or cin != cout else None
        self.act = nn.ReLU()

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        return self.act(self.conv3(self.conv2(self.conv1(x))) + identity)


class Stage(nn.Sequential):
    def __init__(self, blocks: list[nn.Module]):
        super().__init__(OrderedDict((f"block{j}", b) for j, b in enumerate(blocks)))


class FeatureExtractor(nn.Module):
    """Ordered layer graph ending in global average pooling.

    Every top-level layer is a tap point; ``features`` is always the final
    pre-pooling map (after CBAM when CBAM sits at the end).
    """

    def __init__(self, layers: list[tuple[str, nn.Module]], embed_dim: int, spec: BackboneSpec | None = None,
                 cbam_channels: dict[str, int] | None = None):
        super().__init__()
        self.spec = spec
        self.embed_dim = embed_dim
        self.layer_names = [name for name, _ in layers]
        for name, module in layers:
            self.add_module(name, module)
        self.cbam_after: str | None = None
        if spec is not None and spec.with_cbam:
            where = spec.cbam.placement or self.layer_names[-2 if self.layer_names[-1] == "head" else -1]
            if where == "features":
                where = self.layer_names[-1]
            if where not in self.layer_names:
                raise ValueError(f"CBAM placement {where!r} is not a tap point of {spec.family}: {self.layer_names}")
            self.cbam = CBAM(cbam_channels[where], spec.cbam)
            self.cbam_after = where
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten(1)

    @property
    def tap_points(self) -> list[str]:
        return self.layer_names + ["features"]

    def forward_maps(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        taps = {}
        for name in self.layer_names:
            x = getattr(self, name)(x)
            if name == self.cbam_after:
                x = self.cbam(x)
            taps[name] = x
        taps["features"] = x
        return taps

    def embed(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.flatten(self.pool(fmap))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed(self.forward_maps(x)["features"])


def _init_weights(model: nn.Module, nonlinearity: str) -> None:
    if any(p.is_meta for p in model.parameters()):
        return  # structure only (profiling); there is no storage to fill
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity=nonlinearity)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))


def efficientnet(spec: BackboneSpec, stages=EFFNET_B0_STAGES) -> FeatureExtractor:
    width, depth, _ = EFFNET_COEFFS.get(spec.family, (1.0, 1.0, 224))
    stem = round_filters(EFFNET_STEM, width)
    layers: list[tuple[str, nn.Module]] = [("stem", ConvBNAct(3, stem, 3, 2))]
    channels = {"stem": stem}
    total = sum(round_repeats(s[5], depth) for s in stages)
    done = 0
    cin = stem
    for i, (expand, kernel, stride, _, cout, repeats) in enumerate(stages, start=1):
        cout = round_filters(cout, width)
        blocks = []
        for j in range(round_repeats(repeats, depth)):
            rate = spec.drop_path_rate * done / total
            blocks.append(MBConv(cin, cout, expand, kernel, stride if j == 0 else 1, 0.25, rate))
            cin = cout
            done += 1
        layers.append((f"stage{i}", Stage(blocks)))
        channels[f"stage{i}"] = cout
    head = round_filters(EFFNET_HEAD, width)
    layers.append(("head", ConvBNAct(cin, head, 1)))
    channels["head"] = head
    model = FeatureExtractor(layers, head, spec, channels)
    _init_weights(model, "relu")
    return model


def resnet(spec: BackboneSpec, layout: tuple[str, tuple[int, ...]] | None = None) -> FeatureExtractor:
    kind, counts = layout or RESNET_LAYOUT[spec.family]
    block_cls = BasicBlock if kind == "basic" else Bottleneck
    stem = nn.Sequential(OrderedDict([
        ("conv", nn.Conv2d(3, 64, 7, 2, 3, bias=False)),
        ("bn", nn.BatchNorm2d(64)),
        ("act", nn.ReLU()),
        ("pool", nn.MaxPool2d(3, 2, 1)),
    ]))
    layers: list[tuple[str, nn.Module]] = [("stem", stem)]
    channels = {"stem": 64}
    cin = 64
    for i, n in enumerate(counts, start=1):
        width = 64 * 2 ** (i - 1)
        blocks = []
        for j in range(n):
            blocks.append(block_cls(cin, width, 2 if (j == 0 and i > 1) else 1))
            cin = width * block_cls.expansion
        layers.append((f"stage{i}", Stage(blocks)))
        channels[f"stage{i}"] = cin
    model = FeatureExtractor(layers, cin, spec, channels)
    _init_weights(model, "relu")
    return model


def build_backbone(spec: BackboneSpec) -> FeatureExtractor:
    if spec.family.startswith("effnet"):
        model = efficientnet(spec)
    elif spec.family.startswith("resnet"):
        model = resnet(spec)
    else:
        raise ValueError(f"unknown backbone family {spec.family!r}")
    assert model.embed_dim == EMBED_DIMS[spec.family], (model.embed_dim, spec.family)
    return model


def forward_features(extractor: FeatureExtractor, batch: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    if batch.shape[-1] < 32 or batch.shape[-2] < 32:
        raise ValueError("input resolution must be >= 32")
    if not torch.isfinite(batch).all():
        raise ValueError("non-finite values in input batch")
    taps = extractor.forward_maps(batch)
    return extractor.embed(taps["features"]), taps
