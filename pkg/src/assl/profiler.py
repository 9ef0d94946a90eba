"""Analytic parameter/FLOP accounting and training-step timing.

FLOP convention: one multiply-accumulate counts as one FLOP. Convolutions and
linear layers are counted as MACs; normalization, activation and pooling layers
cost one op per output element. Residual additions and gating products are not
counted. Counts are per image.
"""
from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .attention import CBAM
from .backbones import BackboneSpec, build_backbone

_ELEMENTWISE = (nn.BatchNorm2d, nn.BatchNorm1d, nn.ReLU, nn.SiLU, nn.Sigmoid, nn.GELU,
                nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)


@dataclass
class ProfileReport:
    family: str
    with_cbam: bool
    params: int
    flops: int
    resolution: int
    seconds_per_iter: float | None = None
    batch_size: int | None = None
    hardware: dict | None = None
    param_breakdown: dict[str, int] = field(default_factory=dict)
    flop_breakdown: dict[str, int] = field(default_factory=dict)
    table_reference: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# Reference values from the compute table: params (M), GFLOPs, s/iter.
TABLE_REFERENCE = {
    ("resnet50", False): {"params_m": 27.969, "gflops": 4.109, "sec_per_iter": 0.967},
    ("effnet-b3", False): {"params_m": 13.255, "gflops": 0.992, "sec_per_iter": 0.3588},
    ("effnet-b3", True): {"params_m": 13.274, "gflops": 0.992, "sec_per_iter": 0.3597},
}


def count_params(model: nn.Module, include_head: bool = True, head_prefix: str = "head.") -> tuple[int, dict[str, int]]:
    """Exact count with a per-module breakdown (parameters owned directly by each module)."""
    breakdown: dict[str, int] = {}
    for mod_name, module in model.named_modules():
        n = sum(p.numel() for p in module.parameters(recurse=False))
        if not n:
            continue
        if not include_head and (mod_name + ".").startswith(head_prefix):
            continue
        breakdown[mod_name or "<root>"] = n
    return sum(breakdown.values()), breakdown


def _conv_flops(m: nn.Conv2d, out: torch.Tensor) -> int:
    kh, kw = m.kernel_size
    return kh * kw * (m.in_channels // m.groups) * m.out_channels * out.shape[-2] * out.shape[-1]


def _cbam_flops(m: CBAM, inp: torch.Tensor) -> int:
    c, h, w = inp.shape[1:]
    hidden = m.channel.fc1.out_features
    k = m.spatial.conv.kernel_size[0]
    channel = 2 * c + 2 * (c * hidden + hidden * c) + 2 * hidden + c  # pools, shared MLP, relu, sigmoid
    spatial = 2 * h * w + k * k * 2 * h * w + h * w                 # pools, conv, sigmoid
    return channel + spatial


def count_flops(model: nn.Module, resolution: int = 224) -> tuple[int, dict[str, int]]:
    """Per-image FLOPs at ``resolution``, traced on the meta device (no real compute)."""
    breakdown: dict[str, int] = {}
    hooks = []
    cbam_children = set()
    for name, m in model.named_modules():
        if isinstance(m, CBAM):
            cbam_children.update(id(x) for x in m.modules())

    def make_hook(name):
        def hook(m, inputs, out):
            if isinstance(m, CBAM):
                n = _cbam_flops(m, inputs[0])
            elif id(m) in cbam_children:
                return
            elif isinstance(m, nn.Conv2d):
                n = _conv_flops(m, out)
            elif isinstance(m, nn.Linear):
                n = m.in_features * m.out_features * (out.numel() // out.shape[-1] // out.shape[0])
            else:
                n = out[0].numel()
            breakdown[name] = breakdown.get(name, 0) + int(n)
        return hook

    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, CBAM) + _ELEMENTWISE):
            hooks.append(m.register_forward_hook(make_hook(name)))
    try:
        param = next(model.parameters())
        x = torch.empty(1, 3, resolution, resolution, device="meta", dtype=param.dtype)
        meta_model = model if param.device.type == "meta" else None
        if meta_model is None:
            # trace a structural copy so real weights are never touched
            with torch.device("meta"):
                meta_model = _meta_clone(model)
            for h in hooks:
                h.remove()
            return count_flops(meta_model, resolution)
        was_training = model.training
        model.eval()
        with torch.no_grad():
            model(x)
        model.train(was_training)
    finally:
        for h in hooks:
            h.remove()
    return sum(breakdown.values()), breakdown


def _meta_clone(model: nn.Module) -> nn.Module:
    spec = getattr(model, "spec", None)
    if spec is not None:
        return build_backbone(spec)
    import copy
    return copy.deepcopy(model).to("meta")


def hardware_descriptor() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "torch_threads": torch.get_num_threads(),
        "torch": torch.__version__,
    }


def benchmark_iteration(model: nn.Module, batch_size: int = 32, resolution: int = 224, iterations: int = 10,
                        warmup: int = 3, micro_batch: int | None = None, channels_last: bool = True,
                        seed: int = 0) -> float:
    """Mean wall-clock seconds of one training iteration (forward, backward, SGD step).

    ``micro_batch`` splits each iteration into accumulated chunks so that large
    batches fit in limited memory; the iteration still covers ``batch_size`` images.
    """
    if iterations < 10:
        raise ValueError("benchmark needs at least 10 timed iterations")
    times = iteration_times(model, batch_size, resolution, iterations, warmup, micro_batch, channels_last, seed)
    return sum(times) / len(times)


def iteration_times(model: nn.Module, batch_size: int = 32, resolution: int = 224, iterations: int = 10,
                    warmup: int = 3, micro_batch: int | None = None, channels_last: bool = True,
                    seed: int = 0) -> list[float]:
    step = training_step(model, batch_size, resolution, micro_batch, channels_last, seed)
    for _ in range(warmup):
        step()
    out = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        step()
        out.append(time.perf_counter() - t0)
    return out


def training_step(model: nn.Module, batch_size: int = 32, resolution: int = 224, micro_batch: int | None = None,
                  channels_last: bool = True, seed: int = 0):
    """Return a closure running one timed training iteration on fixed random data."""
    gen = torch.Generator().manual_seed(seed)
    micro = micro_batch or batch_size
    chunks = [min(micro, batch_size - i) for i in range(0, batch_size, micro)]
    fmt = torch.channels_last if channels_last else torch.contiguous_format
    model = model.to(memory_format=fmt).train()
    xs = [torch.randn(n, 3, resolution, resolution, generator=gen).to(memory_format=fmt) for n in chunks]
    head = nn.Linear(getattr(model, "embed_dim", 1000), 4)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=1e-4, momentum=0.9)
    targets = [torch.randint(0, 4, (n,), generator=gen) for n in chunks]

    def step():
        opt.zero_grad(set_to_none=True)
        for x, y in zip(xs, targets):
            loss = nn.functional.cross_entropy(head(model(x)), y) * (x.shape[0] / batch_size)
            loss.backward()
        opt.step()
    return step


def profile(spec: BackboneSpec, resolution: int = 224, batch_size: int | None = None, iterations: int = 10,
            micro_batch: int | None = None) -> ProfileReport:
    with torch.device("meta"):
        meta = build_backbone(spec)
    params, pb = count_params(meta)
    flops, fb = count_flops(meta, resolution)
    report = ProfileReport(spec.family, spec.with_cbam, params, flops, resolution,
                           param_breakdown=pb, flop_breakdown=fb,
                           table_reference=TABLE_REFERENCE.get((spec.family, spec.with_cbam)))
    if batch_size:
        model = build_backbone(spec)
        report.seconds_per_iter = benchmark_iteration(model, batch_size, resolution, iterations,
                                                      micro_batch=micro_batch)
        report.batch_size = batch_size
        report.hardware = hardware_descriptor()
    return report
