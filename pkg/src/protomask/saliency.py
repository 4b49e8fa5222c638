"""Prototype relevance maps restricted to the winning view.

Relevance is gradient times input of a prototype's pooled similarity. Because
the pooled value is read from a single view, every other view receives exactly
zero gradient, so the map never leaves the crop that produced the activation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .maskgen import ViewBatch, tight_bbox
from .model import PrototypeModel


@dataclass
class RelevanceMap:
    values: np.ndarray  # [Hv, Wv], max-normalized
    view_index: int
    provenance: tuple[int, int, int, int]
    per_view: Optional[np.ndarray] = None  # raw relevance of all views [V, Hv, Wv]


def prototype_saliency(model: PrototypeModel, views: ViewBatch, prototype: int) -> RelevanceMap:
    if not 0 <= prototype < model.num_prototypes:
        raise IndexError(f"prototype {prototype} out of range [0, {model.num_prototypes})")
    if not views.valid.any():
        raise ValueError("view batch has no valid views")
    x = torch.from_numpy(views.views).clone().requires_grad_(True)
    valid = torch.from_numpy(views.valid)
    with torch.enable_grad():
        result = model(x, valid)
        (grad,) = torch.autograd.grad(result.pooled[prototype], x)
    relevance = (grad.abs() * x.detach().abs()).sum(dim=1).numpy()
    v = int(result.argmax_view[prototype])
    values = relevance[v].astype(np.float64)
    peak = values.max()
    if peak > 0:
        values = values / peak
    return RelevanceMap(values, v, views.provenance[v], relevance)


def map_to_image(rel: RelevanceMap, image_shape: tuple[int, int]) -> np.ndarray:
    """Resize the map onto its source box in the full image; zero elsewhere."""
    h, w = image_shape
    x0, y0, x1, y1 = rel.provenance
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"provenance box {rel.provenance} outside image of size {w}x{h}")
    out = np.zeros((h, w), dtype=np.float64)
    src = torch.from_numpy(np.ascontiguousarray(rel.values))[None, None]
    resized = F.interpolate(src, size=(y1 - y0, x1 - x0), mode="bilinear", align_corners=False)
    out[y0:y1, x0:x1] = np.clip(resized[0, 0].numpy(), 0.0, None)
    return out


def threshold_region(relevance: np.ndarray, percentile: float = 95.0) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Pixels at or above the given percentile of the nonzero relevance values."""
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    nonzero = relevance[relevance > 0]
    if nonzero.size == 0:
        raise ValueError("relevance map is all zero")
    cut = np.percentile(nonzero, percentile, method="lower")  # an observed value, so 0+ keeps every pixel
    region = (relevance >= cut) & (relevance > 0)
    return region, tight_bbox(region)


def heatmap_overlay(image: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """RGBA uint8 image: the input with relevance drawn in red, alpha = relevance."""
    rgb = np.clip(image.transpose(1, 2, 0), 0, 1)
    peak = relevance.max()
    alpha = relevance / peak if peak > 0 else relevance
    red = np.zeros_like(rgb)
    red[..., 0] = 1.0
    mixed = rgb * (1 - alpha[..., None]) + red * alpha[..., None]
    rgba = np.concatenate([mixed, 0.35 + 0.65 * alpha[..., None]], axis=-1)
    return (rgba * 255).round().astype(np.uint8)
