"""Contrastive objectives and per-step logic for SimCLR, MoCo v3 and SwAV."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import FeatureExtractor

METHODS = ("simclr", "mocov3", "swav")


@dataclass
class SslConfig:
    method: str = "simclr"
    temperature: float = 0.1
    proj_hidden: int = 512
    proj_out: int = 128
    momentum: float = 0.99        # mocov3 key encoder, ramped to 1.0 by cosine
    pred_hidden: int = 512        # mocov3 prediction head
    n_prototypes: int = 100       # swav
    sinkhorn_iterations: int = 3
    sinkhorn_epsilon: float = 0.05
    epochs: int = 300
    batch_size: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")
        if self.method == "swav" and self.n_prototypes < 2:
            raise ValueError("swav needs at least 2 prototypes")


class ProjectionHead(nn.Module):
    """Linear -> BN -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden: int, out: int, batch_norm: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, bias=not batch_norm)
        self.bn = nn.BatchNorm1d(hidden) if batch_norm else nn.Identity()
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, out)
        self.out_dim = out

    def forward(self, x):
        return self.fc2(self.act(self.bn(self.fc1(x))))


# ---------------------------------------------------------------------------
# losses


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def nt_xent_loss(projections: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent over 2N rows where rows 2i and 2i+1 are the two views of sample i."""
    _check_temperature(temperature)
    n2 = projections.shape[0]
    if n2 < 2 or n2 % 2:
        raise ValueError("expected an even number (>= 2) of projection rows")
    z = F.normalize(projections, dim=1)
    logits = z @ z.T / temperature
    logits = logits.masked_fill(torch.eye(n2, dtype=torch.bool, device=z.device), float("-inf"))
    positives = torch.arange(n2, device=z.device) ^ 1
    return F.cross_entropy(logits, positives)


def interleave(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.stack([a, b], dim=1).reshape(-1, *a.shape[1:])


def info_nce(queries: torch.Tensor, keys: torch.Tensor, temperature: float) -> torch.Tensor:
    logits = F.normalize(queries, dim=1) @ F.normalize(keys, dim=1).T / temperature
    return F.cross_entropy(logits, torch.arange(queries.shape[0], device=queries.device))


def mocov3_loss(queries: torch.Tensor, keys: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives; row i of ``keys`` is the positive for row i of ``queries``."""
    _check_temperature(temperature)
    return 0.5 * (info_nce(queries, keys, temperature) + info_nce(keys, queries, temperature))


@torch.no_grad()
def sinkhorn_normalize(scores: torch.Tensor, iterations: int = 3, epsilon: float = 0.05) -> torch.Tensor:
    """Balanced soft assignment of B samples to K prototypes.

    Starting from exp(scores / epsilon), columns are rescaled to sum to 1/K and
    rows to 1/B, ``iterations`` times, rows last.
    """
    if iterations < 1:
        raise ValueError("need at least one Sinkhorn iteration")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    B, K = scores.shape
    # log domain: identical iterates to the exp form, without overflow or underflow
    log_q = scores / epsilon
    for _ in range(iterations):
        log_q = log_q - torch.logsumexp(log_q, dim=0, keepdim=True) - math.log(K)
        log_q = log_q - torch.logsumexp(log_q, dim=1, keepdim=True) - math.log(B)
    return torch.exp(log_q)


def swapped_prediction_loss(codes1: torch.Tensor, codes2: torch.Tensor,
                            log_probs1: torch.Tensor, log_probs2: torch.Tensor) -> torch.Tensor:
    """Cross entropy of each view's log-probabilities against the other view's codes (rows sum to 1)."""
    return -0.5 * ((codes1 * log_probs2).sum(1).mean() + (codes2 * log_probs1).sum(1).mean())


def swav_loss(scores1: torch.Tensor, scores2: torch.Tensor, temperature: float,
              iterations: int = 3, epsilon: float = 0.05) -> torch.Tensor:
    _check_temperature(temperature)
    B = scores1.shape[0]
    q1 = sinkhorn_normalize(scores1.detach(), iterations, epsilon) * B
    q2 = sinkhorn_normalize(scores2.detach(), iterations, epsilon) * B
    return swapped_prediction_loss(q1, q2, F.log_softmax(scores1 / temperature, 1),
                                   F.log_softmax(scores2 / temperature, 1))


# ---------------------------------------------------------------------------
# momentum encoder


@torch.no_grad()
def momentum_update(query: Mapping[str, torch.Tensor], key: Mapping[str, torch.Tensor], m: float):
    """key <- m * key + (1 - m) * query for every named array (in place); returns ``key``."""
    if set(query) != set(key):
        missing = sorted(set(query) ^ set(key))
        raise ValueError(f"parameter names differ between query and key: {missing[:3]}")
    for name, k in key.items():
        q = query[name]
        if q.shape != k.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(q.shape)} vs {tuple(k.shape)}")
        if m == 1:
            continue
        if m == 0:
            k.copy_(q)
            continue
        mixed = k * m + q * (1 - m)
        k.copy_(torch.minimum(torch.maximum(mixed, torch.minimum(k, q)), torch.maximum(k, q)))
    return key


def momentum_schedule(base: float, step: int, total_steps: int) -> float:
    """Cosine ramp of the key-encoder momentum from ``base`` to 1."""
    if total_steps <= 0:
        return base
    return 1 - (1 - base) * (math.cos(math.pi * step / total_steps) + 1) / 2


# ---------------------------------------------------------------------------
# models


class SslModel(nn.Module):
    """Backbone plus method-specific heads. ``loss(v1, v2)`` is the training objective."""

    method = ""

    def __init__(self, backbone: FeatureExtractor, cfg: SslConfig):
        super().__init__()
        self.backbone = backbone
        self.cfg = cfg

    def after_step(self, step: int, total_steps: int) -> None:
        pass


class SimCLR(SslModel):
    method = "simclr"

    def __init__(self, backbone, cfg):
        super().__init__(backbone, cfg)
        self.head = ProjectionHead(backbone.embed_dim, cfg.proj_hidden, cfg.proj_out)

    def loss(self, v1, v2):
        z = self.head(self.backbone(torch.cat([v1, v2])))
        n = v1.shape[0]
        return nt_xent_loss(interleave(z[:n], z[n:]), self.cfg.temperature)


class MoCoV3(SslModel):
    method = "mocov3"

    def __init__(self, backbone, cfg):
        super().__init__(backbone, cfg)
        self.head = ProjectionHead(backbone.embed_dim, cfg.proj_hidden, cfg.proj_out)
        self.predictor = ProjectionHead(cfg.proj_out, cfg.pred_hidden, cfg.proj_out)
        self.key_backbone = copy.deepcopy(backbone)
        self.key_head = copy.deepcopy(self.head)
        for p in list(self.key_backbone.parameters()) + list(self.key_head.parameters()):
            p.requires_grad_(False)

    def key_params(self):
        return ({f"backbone.{k}": v for k, v in self.backbone.named_parameters()}
                | {f"head.{k}": v for k, v in self.head.named_parameters()},
                {f"backbone.{k}": v for k, v in self.key_backbone.named_parameters()}
                | {f"head.{k}": v for k, v in self.key_head.named_parameters()})

    def loss(self, v1, v2):
        n = v1.shape[0]
        q = self.predictor(self.head(self.backbone(torch.cat([v1, v2]))))
        with torch.no_grad():
            k = self.key_head(self.key_backbone(torch.cat([v1, v2])))
        tau = self.cfg.temperature
        return 0.5 * (mocov3_loss(q[:n], k[n:], tau) + mocov3_loss(q[n:], k[:n], tau))

    def after_step(self, step, total_steps):
        query, key = self.key_params()
        momentum_update(query, key, momentum_schedule(self.cfg.momentum, step, total_steps))


class SwAV(SslModel):
    method = "swav"

    def __init__(self, backbone, cfg):
        super().__init__(backbone, cfg)
        self.head = ProjectionHead(backbone.embed_dim, cfg.proj_hidden, cfg.proj_out)
        self.prototypes = nn.Linear(cfg.proj_out, cfg.n_prototypes, bias=False)
        self.normalize_prototypes()

    @torch.no_grad()
    def normalize_prototypes(self):
        self.prototypes.weight.copy_(F.normalize(self.prototypes.weight, dim=1))

    def loss(self, v1, v2):
        self.normalize_prototypes()
        n = v1.shape[0]
        z = F.normalize(self.head(self.backbone(torch.cat([v1, v2]))), dim=1)
        scores = self.prototypes(z)
        return swav_loss(scores[:n], scores[n:], self.cfg.temperature,
                         self.cfg.sinkhorn_iterations, self.cfg.sinkhorn_epsilon)

    def after_step(self, step, total_steps):
        self.normalize_prototypes()


def build_ssl_model(backbone: FeatureExtractor, cfg: SslConfig) -> SslModel:
    return {"simclr": SimCLR, "mocov3": MoCoV3, "swav": SwAV}[cfg.method](backbone, cfg)


def _step(model: SslModel, v1, v2):
    model.zero_grad(set_to_none=True)
    loss = model.loss(v1, v2)
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}
    return loss.detach(), grads


def simclr_step(backbone: FeatureExtractor, head: ProjectionHead, views: tuple[torch.Tensor, torch.Tensor],
                temperature: float):
    """One SimCLR forward/backward; returns (loss, gradients keyed ``backbone.*``/``head.*``)."""
    model = SimCLR.__new__(SimCLR)
    nn.Module.__init__(model)
    model.backbone, model.head = backbone, head
    model.cfg = SslConfig(temperature=temperature)
    return _step(model, *views)


def swav_step(backbone: FeatureExtractor, head: ProjectionHead, prototypes: nn.Linear,
              views: tuple[torch.Tensor, torch.Tensor], temperature: float,
              iterations: int = 3, epsilon: float = 0.05):
    model = SwAV.__new__(SwAV)
    nn.Module.__init__(model)
    model.backbone, model.head, model.prototypes = backbone, head, prototypes
    model.cfg = SslConfig(method="swav", temperature=temperature, sinkhorn_iterations=iterations,
                          sinkhorn_epsilon=epsilon, n_prototypes=prototypes.out_features)
    out = _step(model, *views)
    model.normalize_prototypes()
    return out
