"""LARS / SGD-momentum updates, linear LR scaling and warmup-cosine schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch
from torch import nn


@dataclass
class OptimConfig:
    optimizer: str = "lars"
    base_lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001
    exclude_from_adaptation: list[str] = field(default_factory=lambda: ["bias", "bn"])
    reference_batch: int | None = 256  # base_lr is scaled by batch/reference when set

    def __post_init__(self):
        if self.optimizer not in ("lars", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_for_batch(self, batch_size: int) -> float:
        if self.reference_batch is None:
            return self.base_lr
        return linear_scaled_lr(self.base_lr, batch_size, self.reference_batch)


@dataclass
class ScheduleConfig:
    base_lr: float = 0.3
    warmup_epochs: int = 10
    total_epochs: int = 300
    min_lr: float = 0.0
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < max(self.total_epochs, 1):
            raise ValueError("need 0 <= warmup_epochs < total_epochs")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def linear_scaled_lr(reference_lr: float, batch_size: int, reference_batch: int = 256) -> float:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    return reference_lr * batch_size / reference_batch


def warmup_cosine_lr(step: float, cfg: ScheduleConfig) -> float:
    """Linear ramp from 0 over the warmup steps, then cosine decay to ``min_lr`` at the last step."""
    warm, last = cfg.warmup_steps, cfg.total_steps - 1
    if step < warm:
        return cfg.base_lr * step / warm
    t = 0.0 if last <= warm else min(1.0, (step - warm) / (last - warm))
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * (1 + math.cos(math.pi * t)) / 2


# ---------------------------------------------------------------------------
# functional updates


def _check_finite(name, g: torch.Tensor) -> None:
    if not torch.isfinite(g).all():
        raise FloatingPointError(f"non-finite gradient for {name}")


def lars_update(p: torch.Tensor, g: torch.Tensor, v: torch.Tensor, lr: float, momentum: float,
                weight_decay: float, eta: float, adapt: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-array LARS rule; excluded arrays (``adapt=False``) get plain momentum SGD without decay."""
    if adapt:
        d = g + weight_decay * p
        p_norm, d_norm = torch.linalg.vector_norm(p), torch.linalg.vector_norm(d)
        if p_norm > 0 and d_norm > 0:
            # local * d == eta*|p| * d/|d|; the normalized form cannot overflow for tiny |d|
            v = momentum * v + lr * (eta * p_norm) * (d / d_norm)
            return p - v, v
    else:
        d = g
    v = momentum * v + lr * d
    return p - v, v


def lars_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              velocity: Mapping[str, torch.Tensor], lr: float, momentum: float = 0.9,
              weight_decay: float = 0.0, eta: float = 0.001, exclude: Iterable[str] = ()):
    """Return updated (params, velocity) dicts; names in ``exclude`` skip the layer-wise adaptation."""
    exclude = set(exclude)
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        _check_finite(name, g)
        v = velocity.get(name, torch.zeros_like(p))
        new_p[name], new_v[name] = lars_update(p, g, v, lr, momentum, weight_decay, eta, name not in exclude)
    return new_p, new_v


def sgd_momentum_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                      velocity: Mapping[str, torch.Tensor], lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0):
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        _check_finite(name, g)
        v = momentum * velocity.get(name, torch.zeros_like(p)) + (g + weight_decay * p)
        new_p[name], new_v[name] = p - lr * v, v
    return new_p, new_v


# ---------------------------------------------------------------------------
# torch.optim wrappers


class LARS(torch.optim.Optimizer):
    """In-place LARS over parameter groups; groups with ``adapt=False`` skip adaptation and decay."""

    def __init__(self, params, lr=0.3, momentum=0.9, weight_decay=1e-6, eta=0.001):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay, eta=eta, adapt=True))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                _check_finite("parameter", p.grad)
                state = self.state[p]
                v = state.get("velocity")
                if v is None:
                    v = state["velocity"] = torch.zeros_like(p)
                new_p, new_v = lars_update(p, p.grad, v, group["lr"], group["momentum"],
                                           group["weight_decay"], group["eta"], group["adapt"])
                p.copy_(new_p)
                v.copy_(new_v)


class SGDMomentum(torch.optim.Optimizer):
    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay, adapt=True))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            wd = group["weight_decay"] if group["adapt"] else 0.0
            for p in group["params"]:
                if p.grad is None:
                    continue
                _check_finite("parameter", p.grad)
                state = self.state[p]
                v = state.get("velocity")
                if v is None:
                    v = state["velocity"] = torch.zeros_like(p)
                v.mul_(group["momentum"]).add_(p.grad + wd * p)
                p.sub_(group["lr"] * v)


def is_excluded(name: str, p: torch.Tensor, patterns: Iterable[str]) -> bool:
    """Biases and normalization parameters (1-D arrays) are excluded from adaptation and decay."""
    return p.ndim <= 1 or any(f".{pat}." in f".{name}." or name.endswith(f".{pat}") for pat in patterns)


def build_optimizer(model: nn.Module, cfg: OptimConfig, lr: float) -> torch.optim.Optimizer:
    adapt, plain = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (plain if is_excluded(name, p, cfg.exclude_from_adaptation) else adapt).append(p)
    groups = [{"params": adapt}, {"params": plain, "adapt": False}]
    groups = [g for g in groups if g["params"]]
    if cfg.optimizer == "lars":
        return LARS(groups, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                    eta=cfg.trust_coefficient)
    return SGDMomentum(groups, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
