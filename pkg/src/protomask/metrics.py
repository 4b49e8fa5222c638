"""Evaluation suite: performance, compactness, contrastivity and covariant complexity."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import f1_score

from .data import ImageSample
from .maskgen import MaskSet, make_views
from .model import PrototypeModel, forward
from .saliency import map_to_image, prototype_saliency, threshold_region

log = logging.getLogger(__name__)

DEFAULT_ACTIVITY_EPS = 1e-3


def _ranking(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties to the lower index."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    logits, labels = np.asarray(logits), np.asarray(labels)
    top = _ranking(logits)[:, :k]
    return 100.0 * float(np.mean((top == labels[:, None]).any(axis=1)))


def classification_scores(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    """(top-1 accuracy, top-3 accuracy, macro F1), all in percent."""
    logits, labels = np.asarray(logits), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    n_classes = logits.shape[1]
    pred = _ranking(logits)[:, 0]
    f1 = f1_score(labels, pred, labels=np.arange(n_classes), average="macro", zero_division=0)
    return topk_accuracy(logits, labels, 1), topk_accuracy(logits, labels, min(3, n_classes)), 100.0 * float(f1)


def _check_eps(activity_eps: float) -> None:
    if activity_eps <= 0:
        raise ValueError(f"activity_eps must be positive, got {activity_eps}")


def global_size(head: np.ndarray, activity_eps: float = DEFAULT_ACTIVITY_EPS) -> int:
    """Number of prototypes with an active weight for at least one class."""
    _check_eps(activity_eps)
    return int((np.abs(head) > activity_eps).any(axis=0).sum())


def sparsity(head: np.ndarray, activity_eps: float = DEFAULT_ACTIVITY_EPS) -> float:
    _check_eps(activity_eps)
    head = np.asarray(head)
    return 100.0 * float((np.abs(head) <= activity_eps).sum()) / head.size


def npr(head: np.ndarray, activity_eps: float = DEFAULT_ACTIVITY_EPS) -> float:
    """Count of negative weights over count of positive weights, ignoring |w| <= eps."""
    _check_eps(activity_eps)
    head = np.asarray(head)
    positive = int((head > activity_eps).sum())
    if positive == 0:
        raise ValueError("head has no positive weights")
    return float((head < -activity_eps).sum()) / positive


def top5_prototypes(pooled: np.ndarray, k: int = 5) -> tuple[np.ndarray, bool]:
    """Indices of the ``k`` most activated prototypes and whether ``k`` were available."""
    order = _ranking(np.asarray(pooled))
    return order[:k], len(order) >= k


def box_area(box) -> int:
    x0, y0, x1, y1 = box
    return max(0, x1 - x0) * max(0, y1 - y0)


def box_iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return inter / union


def vlc(bboxes_per_image: Sequence[Sequence[tuple]]) -> float:
    """Visualization location change: 100 * (1 - mean pairwise box IoU), averaged over images.

    Zero-area boxes are dropped; images left with fewer than two boxes are skipped.
    """
    scores = []
    for boxes in bboxes_per_image:
        kept = [b for b in boxes if box_area(b) > 0]
        if len(kept) < len(boxes):
            log.warning("dropping %d zero-area boxes", len(boxes) - len(kept))
        if len(kept) < 2:
            continue
        ious = [box_iou(a, b) for a, b in combinations(kept, 2)]
        scores.append(100.0 * (1.0 - float(np.mean(ious))))
    if not scores:
        raise ValueError("no image has two or more usable boxes")
    return float(np.mean(scores))


def apd(prototypes: np.ndarray, class_assignment: np.ndarray) -> tuple[float, float]:
    """Mean cosine distance over same-class and cross-class unordered prototype pairs.

    A side with no pairs is reported as NaN.
    """
    P = np.asarray(prototypes, dtype=np.float64)
    if len(P) < 2:
        raise ValueError("need at least two prototypes")
    norms = np.linalg.norm(P, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm prototype has no direction")
    U = P / norms[:, None]
    dist = 1.0 - U @ U.T
    owner = np.asarray(class_assignment).argmax(axis=0)
    i, j = np.triu_indices(len(P), k=1)
    same = owner[i] == owner[j]
    intra = float(dist[i[same], j[same]].mean()) if same.any() else math.nan
    inter = float(dist[i[~same], j[~same]].mean()) if (~same).any() else math.nan
    return intra, inter


def region_object_stats(region: np.ndarray, object_mask: np.ndarray) -> tuple[float, float]:
    """(object overlap %, background overlap %) of a region."""
    region, object_mask = np.asarray(region, bool), np.asarray(object_mask, bool)
    if region.shape != object_mask.shape:
        raise ValueError(f"shape mismatch {region.shape} vs {object_mask.shape}")
    size = int(region.sum())
    if size == 0:
        raise ValueError("empty region")
    inside = int((region & object_mask).sum())
    return 100.0 * inside / size, 100.0 * (size - inside) / size


def iord(relevance: np.ndarray, object_mask: np.ndarray) -> float:
    """Mean max-normalized relevance on the object minus mean on the background."""
    object_mask = np.asarray(object_mask, bool)
    if not object_mask.any() or object_mask.all():
        raise ValueError("object mask must be neither empty nor the whole image")
    rel = np.asarray(relevance, dtype=np.float64)
    peak = rel.max()
    if peak > 0:
        rel = rel / peak
    return float(rel[object_mask].mean() - rel[~object_mask].mean())


def consistency(part_sets: Mapping[int, Sequence[frozenset]]) -> Optional[float]:
    """Mean, over prototypes, of the fraction of activation pairs whose part sets intersect.

    ``part_sets`` maps a prototype to the visible parts found in its region for
    each top-k activation. Prototypes with fewer than two activations are
    skipped; returns None when none remain.
    """
    scores = []
    for proto in sorted(part_sets):
        acts = part_sets[proto]
        if len(acts) < 2:
            continue
        pairs = list(combinations(acts, 2))
        scores.append(sum(bool(a & b) for a, b in pairs) / len(pairs))
    if not scores:
        return None
    return 100.0 * float(np.mean(scores))


def parts_in_region(sample: ImageSample, region: np.ndarray) -> frozenset:
    return frozenset(p.part_id for p in sample.visible_parts() if region[int(p.y), int(p.x)])


PERFORMANCE_COLUMNS = ("accuracy", "top3_accuracy", "f1_macro", "global_size", "sparsity", "npr")
EXPLANATION_COLUMNS = ("vlc", "apd_intra", "apd_inter", "object_overlap", "background_overlap", "iord", "consistency")


@dataclass
class MetricReport:
    accuracy: float
    top3_accuracy: float
    f1_macro: float
    global_size: int
    sparsity: float
    npr: Optional[float]
    vlc: Optional[float]
    apd_intra: Optional[float]
    apd_inter: Optional[float]
    object_overlap: Optional[float] = None
    background_overlap: Optional[float] = None
    iord: Optional[float] = None
    consistency: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        # NaN is not valid JSON
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        cols = PERFORMANCE_COLUMNS + EXPLANATION_COLUMNS
        d = self.to_dict()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        writer.writerow(["" if d[c] is None else d[c] for c in cols])
        return buf.getvalue()


@dataclass
class MetricConfig:
    view_count: int
    view_resolution: tuple[int, int]
    activity_eps: float = DEFAULT_ACTIVITY_EPS
    percentile: float = 95.0
    top_k: int = 5


def evaluate(model: PrototypeModel, samples: Sequence[ImageSample], masksets: Sequence[MaskSet],
             config: MetricConfig) -> MetricReport:
    """Compute every metric on a test set.

    Object/background overlap and IORD need object masks, consistency needs part
    keypoints; each is reported as None when its annotations are missing.
    """
    if not samples:
        raise ValueError("empty test set")
    head = model.head.detach().numpy()
    with torch.no_grad():
        batches = [make_views(s, m, config.view_count, config.view_resolution) for s, m in zip(samples, masksets)]
        results = [forward(b, model) for b in batches]
    logits = np.stack([r.logits.numpy() for r in results])
    labels = np.array([s.label for s in samples])
    acc, top3, f1 = classification_scores(logits, labels)

    try:
        npr_value = npr(head, config.activity_eps)
    except ValueError:
        log.warning("head has no positive weights; NPR undefined")
        npr_value = None
    intra, inter = apd(model.prototypes.detach().numpy(), model.class_assignment.numpy())

    boxes_per_image, obj, bg, iords = [], [], [], []
    part_sets: dict[int, list[frozenset]] = {}
    has_masks = all(s.object_mask is not None for s in samples)
    has_parts = all(s.parts is not None for s in samples) and any(s.visible_parts() for s in samples)
    for sample, batch, result in zip(samples, batches, results):
        top, _ = top5_prototypes(result.pooled.numpy(), config.top_k)
        boxes = []
        for p in top.tolist():
            full = map_to_image(prototype_saliency(model, batch, p), sample.shape)
            try:
                region, box = threshold_region(full, config.percentile)
            except ValueError:
                log.warning("prototype %d has zero relevance on %s", p, sample.image_id)
                continue
            boxes.append(box)
            if has_masks:
                o, b = region_object_stats(region, sample.object_mask)
                obj.append(o)
                bg.append(b)
                if sample.object_mask.any() and not sample.object_mask.all():
                    iords.append(iord(full, sample.object_mask))
            if has_parts:
                part_sets.setdefault(p, []).append(parts_in_region(sample, region))
        boxes_per_image.append(boxes)

    try:
        vlc_value = vlc(boxes_per_image)
    except ValueError:
        vlc_value = None
    return MetricReport(
        accuracy=acc,
        top3_accuracy=top3,
        f1_macro=f1,
        global_size=global_size(head, config.activity_eps),
        sparsity=sparsity(head, config.activity_eps),
        npr=npr_value,
        vlc=vlc_value,
        apd_intra=intra,
        apd_inter=inter,
        object_overlap=float(np.mean(obj)) if obj else None,
        background_overlap=float(np.mean(bg)) if bg else None,
        iord=float(np.mean(iords)) if iords else None,
        consistency=consistency(part_sets) if has_parts else None,
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> dict[str, tuple[Optional[float], Optional[float]]]:
    """Mean and population std per metric over runs; None where any run lacks the metric."""
    out = {}
    for f in fields(MetricReport):
        values = [getattr(r, f.name) for r in reports]
        if any(v is None for v in values):
            out[f.name] = (None, None)
        else:
            arr = np.asarray(values, dtype=np.float64)
            out[f.name] = (float(arr.mean()), float(arr.std()))
    return out
