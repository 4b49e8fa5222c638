"""Multi-view prototype network.

Each view is embedded on its own, compared against every prototype with a
log-inverse-distance similarity, and each prototype keeps only its best view
before the linear class head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .maskgen import ViewBatch

DEFAULT_EPS = 1e-4


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 128
    input_resolution: tuple[int, int] = (32, 32)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.input_resolution = tuple(self.input_resolution)
        self.mean = tuple(self.mean)
        self.std = tuple(self.std)
        if self.embedding_dim < 2:
            raise ValueError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not self.widths:
            raise ValueError("backbone needs at least one conv stage")


@dataclass
class ModelConfig:
    num_classes: int
    prototypes_per_class: int = 10
    eps: float = DEFAULT_EPS
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(nn.Module):
    """Conv stages, global average pooling and a linear map to the embedding space."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        layers = []
        c_in = 3
        for width in config.widths:
            layers += [nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = width
        self.features = nn.Sequential(*layers)
        self.proj = nn.Linear(c_in, config.embedding_dim)
        self.register_buffer("mean", torch.tensor(config.mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(config.std).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.mean) / self.std
        return self.proj(self.features(x).mean(dim=(2, 3)))


def class_assignment_matrix(num_classes: int, prototypes_per_class: int) -> torch.Tensor:
    """[C, |P|] one-hot ownership; prototypes of a class are contiguous."""
    owner = torch.arange(num_classes * prototypes_per_class) // prototypes_per_class
    return F.one_hot(owner, num_classes).T.to(torch.float32).contiguous()


@dataclass
class ForwardResult:
    Z: torch.Tensor  # [..., V, D]
    sim: torch.Tensor  # [..., |P|, V]
    pooled: torch.Tensor  # [..., |P|]
    argmax_view: torch.Tensor  # [..., |P|]
    logits: torch.Tensor  # [..., C]
    probs: torch.Tensor  # [..., C]

    def __getitem__(self, i) -> "ForwardResult":
        return ForwardResult(*(getattr(self, f)[i] for f in
                               ("Z", "sim", "pooled", "argmax_view", "logits", "probs")))


def squared_distances(Z: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """||z - p||^2 for Z [..., V, D] and P [|P|, D] -> [..., |P|, V].

    Computed from explicit differences so that z == p gives exactly zero.
    """
    diff = Z.unsqueeze(-3) - P.unsqueeze(-2)
    return (diff * diff).sum(-1)


def similarity_from_distance(d2, eps: float = DEFAULT_EPS):
    if isinstance(d2, torch.Tensor):
        return torch.log1p(1.0 / (d2 + eps))
    return np.log1p(1.0 / (np.asarray(d2, dtype=np.float64) + eps))


def similarity(z, p, eps: float = DEFAULT_EPS):
    """log(1 + 1 / (||z - p||^2 + eps))."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if isinstance(z, torch.Tensor):
        return similarity_from_distance(((z - p) ** 2).sum(-1), eps)
    z, p = np.asarray(z, dtype=np.float64), np.asarray(p, dtype=np.float64)
    return float(similarity_from_distance(((z - p) ** 2).sum(-1), eps))


def similarity_matrix(Z: torch.Tensor, P: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    if Z.shape[-1] != P.shape[-1]:
        raise ValueError(f"embedding dim {Z.shape[-1]} != prototype dim {P.shape[-1]}")
    return similarity_from_distance(squared_distances(Z, P), eps)


def max_pool(sim: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-prototype maximum over valid views, ties to the lowest view index.

    The value is gathered at the chosen index, so gradient reaches that view only.
    """
    valid = torch.as_tensor(valid, dtype=torch.bool, device=sim.device)
    if not bool(valid.any(dim=-1).all()):
        raise ValueError("max_pool needs at least one valid view per sample")
    masked = sim.masked_fill(~valid.unsqueeze(-2), float("-inf"))
    argmax = masked.argmax(dim=-1)
    pooled = sim.gather(-1, argmax.unsqueeze(-1)).squeeze(-1)
    return pooled, argmax


class PrototypeModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        n_protos = config.num_classes * config.prototypes_per_class
        self.prototypes = nn.Parameter(torch.rand(n_protos, config.backbone.embedding_dim))
        self.register_buffer("class_assignment",
                             class_assignment_matrix(config.num_classes, config.prototypes_per_class))
        self.head = nn.Parameter(self.class_assignment.clone())

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def eps(self) -> float:
        return self.config.eps

    def prototype_classes(self) -> torch.Tensor:
        return self.class_assignment.argmax(dim=0)

    def embed(self, views: torch.Tensor) -> torch.Tensor:
        """[..., V, 3, Hv, Wv] -> [..., V, D], one backbone pass per view."""
        expected = self.config.backbone.input_resolution
        if tuple(views.shape[-2:]) != tuple(expected):
            raise ValueError(f"view resolution {tuple(views.shape[-2:])} != backbone input {expected}")
        lead = views.shape[:-3]
        z = self.backbone(views.reshape(-1, *views.shape[-3:]))
        return z.reshape(*lead, z.shape[-1])

    def head_from(self, Z: torch.Tensor, valid: torch.Tensor) -> ForwardResult:
        sim = similarity_matrix(Z, self.prototypes, self.eps)
        pooled, argmax = max_pool(sim, valid)
        logits = pooled @ self.head.T
        return ForwardResult(Z, sim, pooled, argmax, logits, torch.softmax(logits, dim=-1))

    def forward(self, views: torch.Tensor, valid: torch.Tensor) -> ForwardResult:
        return self.head_from(self.embed(views), valid)


def build_model(config: ModelConfig, seed: int = 0) -> PrototypeModel:
    """Construct a model with weights drawn from a generator seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return PrototypeModel(config)


def batch_tensors(batches: Sequence[ViewBatch]) -> tuple[torch.Tensor, torch.Tensor]:
    views = torch.from_numpy(np.stack([b.views for b in batches]))
    valid = torch.from_numpy(np.stack([b.valid for b in batches]))
    return views, valid


def embed_views(views: ViewBatch, model: PrototypeModel) -> torch.Tensor:
    return model.embed(torch.from_numpy(views.views))


def forward(views: ViewBatch, model: PrototypeModel) -> ForwardResult:
    """Forward pass for the views of a single image."""
    return model(torch.from_numpy(views.views), torch.from_numpy(views.valid))


def similarity_bounds(eps: float = DEFAULT_EPS) -> tuple[float, float]:
    return 0.0, math.log1p(1.0 / eps)
