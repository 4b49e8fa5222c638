"""Segmentation masks: production, ingestion, ranking and view cropping."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .data import ImageSample, read_binary_mask, write_binary_mask

log = logging.getLogger(__name__)

SOURCES = ("toy", "contour", "external_sam2", "external_slit", "external")
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class MaskError(ValueError):
    pass


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) with exclusive upper corner."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise MaskError("mask has no foreground pixels")
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


@dataclass
class SegmentationMask:
    mask: np.ndarray
    area_fraction: float
    bbox: tuple[int, int, int, int]

    @classmethod
    def from_array(cls, mask: np.ndarray) -> "SegmentationMask":
        mask = np.asarray(mask, dtype=bool)
        bbox = tight_bbox(mask)
        return cls(mask, float(mask.sum()) / mask.size, bbox)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class MaskSet:
    masks: list[SegmentationMask]
    source: str = "toy"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {m.shape for m in self.masks}
        if len(shapes) > 1:
            raise MaskError(f"masks of one image must share a shape, got {sorted(shapes)}")
        # stable sort keeps the producer's order among equal areas
        self.masks = sorted(self.masks, key=lambda m: -m.area_fraction)

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i) -> SegmentationMask:
        return self.masks[i]

    @property
    def shape(self) -> Optional[tuple[int, int]]:
        return self.masks[0].shape if self.masks else None

    @property
    def areas(self) -> np.ndarray:
        return np.array([m.area_fraction for m in self.masks])


@dataclass
class ViewBatch:
    views: np.ndarray  # float32 [V, 3, Hv, Wv]
    valid: np.ndarray  # bool [V]
    provenance: list[Optional[tuple[int, int, int, int]]]
    image_shape: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.valid)


def contours_to_masks(contour_image: np.ndarray, threshold: float = 0.001, dilation: int = 3,
                      min_size: int = 4) -> MaskSet:
    """Split an image into regions separated by predicted contour lines.

    Contour pixels above ``threshold`` are dilated with a square kernel of side
    ``dilation``; the 4-connected components of the remaining pixels become masks.
    Components smaller than ``min_size`` pixels are dropped.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if dilation < 1 or dilation % 2 == 0:
        raise ValueError(f"dilation must be odd and >= 1, got {dilation}")
    contour = np.asarray(contour_image, dtype=np.float64) > threshold
    if dilation > 1:
        contour = ndimage.binary_dilation(contour, structure=np.ones((dilation, dilation), bool))
    labels, count = ndimage.label(~contour, structure=FOUR_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    masks = [SegmentationMask.from_array(labels == k) for k in range(1, count + 1) if sizes[k] >= min_size]
    if not masks:
        raise MaskError("contour image leaves no region of at least %d pixels" % min_size)
    return MaskSet(masks, source="contour", meta={"threshold": threshold, "dilation": dilation})


def _cuts(n: int, parts: int, jitter: int, rng: np.random.Generator) -> list[int]:
    cuts = [round(k * n / parts) for k in range(parts + 1)]
    if jitter > 0:
        for k in range(1, parts):
            cuts[k] += int(rng.integers(-jitter, jitter + 1))
        for k in range(1, parts):
            # keep every cell at least one pixel wide
            cuts[k] = int(np.clip(cuts[k], cuts[k - 1] + 1, n - (parts - k)))
    return cuts


def toy_grid_segmenter(image: ImageSample, rows: int, cols: int, jitter_seed: int = 0,
                       jitter: int = 0) -> MaskSet:
    """Partition the image into a rows x cols grid whose inner cut lines move by up to
    ``jitter`` pixels, seeded on the image id and ``jitter_seed``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be >= 1, got {rows}x{cols}")
    h, w = image.shape
    if rows > h or cols > w:
        raise ValueError(f"grid {rows}x{cols} too fine for image {h}x{w}")
    rng = np.random.default_rng([jitter_seed, zlib.crc32(image.image_id.encode())])
    ys = _cuts(h, rows, jitter, rng)
    xs = _cuts(w, cols, jitter, rng)
    masks = []
    for r in range(rows):
        for c in range(cols):
            m = np.zeros((h, w), dtype=bool)
            m[ys[r]:ys[r + 1], xs[c]:xs[c + 1]] = True
            masks.append(SegmentationMask.from_array(m))
    return MaskSet(masks, source="toy", meta={"rows": rows, "cols": cols, "jitter": jitter,
                                               "jitter_seed": jitter_seed})


def with_full_frame(masks: MaskSet) -> MaskSet:
    """Return a copy of ``masks`` with a whole-image mask in front."""
    if masks.shape is None:
        raise MaskError("cannot infer image shape from an empty mask set")
    full = SegmentationMask.from_array(np.ones(masks.shape, dtype=bool))
    return MaskSet([full] + list(masks.masks), masks.source, dict(masks.meta, full_frame=True))


def resize_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(shape):
        return mask
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(img.resize((shape[1], shape[0]), Image.NEAREST)) > 0


def _read_archive_meta(path: Path) -> dict:
    for candidate in (path / "meta.json", path.parent / "meta.json"):
        if candidate.exists():
            return json.loads(candidate.read_text())
    return {}


def load_external_masks(path, image_shape: tuple[int, int]) -> MaskSet:
    """Read ``mask_<k>.png`` files of one image directory of a mask archive.

    Masks may overlap. They are resized with nearest-neighbour sampling to
    ``image_shape`` and re-sorted by area; empty masks are dropped.
    """
    path = Path(path)
    files = sorted(path.glob("mask_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise MaskError(f"no masks found in {path}")
    raw = [read_binary_mask(f) for f in files]
    shapes = {m.shape for m in raw}
    if len(shapes) > 1:
        raise MaskError(f"masks in {path} have incompatible shapes {sorted(shapes)}")
    masks = []
    for f, m in zip(files, raw):
        m = resize_mask(m, image_shape)
        if not m.any():
            log.warning("dropping empty mask %s", f)
            continue
        masks.append(SegmentationMask.from_array(m))
    if not masks:
        raise MaskError(f"all masks in {path} are empty")
    meta = _read_archive_meta(path)
    return MaskSet(masks, source=meta.get("source", "external"), meta=meta.get("params", {}))


def write_mask_archive(root, masksets: dict[str, MaskSet], source: str, params: Optional[dict] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for image_id in sorted(masksets):
        d = root / image_id
        d.mkdir(exist_ok=True)
        for old in d.glob("mask_*.png"):
            old.unlink()
        for k, m in enumerate(masksets[image_id]):
            write_binary_mask(m.mask, d / f"mask_{k}.png")
    meta = {"source": source, "params": params or {}, "images": sorted(masksets)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_mask_archive(root, samples: Sequence[ImageSample]) -> list[MaskSet]:
    root = Path(root)
    if not (root / "meta.json").exists():
        raise FileNotFoundError(f"mask archive metadata missing: {root / 'meta.json'}")
    out = []
    for s in samples:
        d = root / s.image_id
        if not d.is_dir():
            raise FileNotFoundError(f"mask archive {root} has no masks for image '{s.image_id}'")
        out.append(load_external_masks(d, s.shape))
    return out


def rank_mean_sizes(masksets: Sequence[MaskSet]) -> np.ndarray:
    """Mean area fraction of the r-th largest mask over images; missing ranks count as 0."""
    if not masksets:
        raise ValueError("need at least one mask set")
    depth = max(len(ms) for ms in masksets)
    table = np.zeros((len(masksets), depth))
    for i, ms in enumerate(masksets):
        table[i, : len(ms)] = ms.areas
    return table.mean(axis=0)


def select_view_count(masksets: Sequence[MaskSet], size_threshold: float = 0.01) -> int:
    means = rank_mean_sizes(masksets)
    return max(1, int(np.count_nonzero(means > size_threshold)))


def mask_object_overlap(mask: SegmentationMask | np.ndarray, object_mask: np.ndarray) -> float:
    m = mask.mask if isinstance(mask, SegmentationMask) else np.asarray(mask, bool)
    if m.shape != object_mask.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {object_mask.shape}")
    return float(np.logical_and(m, object_mask).sum()) / float(m.sum())


def rank_mean_object_overlap(masksets: Sequence[MaskSet], object_masks: Sequence[np.ndarray]) -> np.ndarray:
    """Mean object overlap of the r-th largest mask, averaged over images that have one."""
    depth = max(len(ms) for ms in masksets)
    sums, counts = np.zeros(depth), np.zeros(depth)
    for ms, obj in zip(masksets, object_masks):
        for r, m in enumerate(ms):
            sums[r] += mask_object_overlap(m, obj)
            counts[r] += 1
    return sums / np.maximum(counts, 1)


def part_signature(mask: SegmentationMask, sample: ImageSample) -> frozenset:
    return frozenset(p.part_id for p in sample.visible_parts() if mask.mask[int(p.y), int(p.x)])


def mask_consistency(samples: Sequence[ImageSample], masksets: Sequence[MaskSet]) -> float:
    """Percentage of same-class images sharing a mask with a given part signature.

    A mask's signature is the set of visible part keypoints it contains. For each
    class and each non-empty signature seen in that class, take the fraction of the
    class's images that have a mask with exactly that signature; average over all
    (class, signature) pairs.
    """
    if not any(s.visible_parts() for s in samples):
        raise ValueError("no visible part annotations to measure mask consistency")
    per_class: dict[int, list[set]] = {}
    for s, ms in zip(samples, masksets):
        sigs = {part_signature(m, s) for m in ms}
        sigs.discard(frozenset())
        per_class.setdefault(s.label, []).append(sigs)
    fractions = []
    for label in sorted(per_class):
        images = per_class[label]
        observed = set().union(*images)
        for sig in sorted(observed, key=sorted):
            fractions.append(sum(sig in sigs for sigs in images) / len(images))
    if not fractions:
        return 0.0
    return 100.0 * float(np.mean(fractions))


def crop_resize(image: np.ndarray, bbox: tuple[int, int, int, int], size: tuple[int, int]) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    crop = torch.from_numpy(np.ascontiguousarray(image[:, y0:y1, x0:x1]))[None]
    out = F.interpolate(crop, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def make_views(image: ImageSample, masks: MaskSet, count: int, view_resolution: tuple[int, int],
               mask_background: bool = False) -> ViewBatch:
    """Crop the image to the bounding boxes of its ``count`` largest masks.

    Slots beyond the available masks hold zero views flagged invalid.
    """
    if count < 1:
        raise ValueError(f"view count must be >= 1, got {count}")
    hv, wv = view_resolution
    views = np.zeros((count, 3, hv, wv), dtype=np.float32)
    valid = np.zeros(count, dtype=bool)
    provenance: list[Optional[tuple[int, int, int, int]]] = [None] * count
    for i, m in enumerate(masks.masks[:count]):
        src = image.image * m.mask[None] if mask_background else image.image
        views[i] = crop_resize(src.astype(np.float32), m.bbox, (hv, wv))
        valid[i] = True
        provenance[i] = m.bbox
    return ViewBatch(views, valid, provenance, image.shape)
