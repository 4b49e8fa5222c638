"""Dataset manifests, sample loading and the synthetic parts dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    """Raised when a manifest cannot be parsed or fails validation."""


class Part(NamedTuple):
    part_id: int
    x: float
    y: float
    visible: bool


@dataclass
class ImageSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    label: int
    image_id: str = ""
    bbox: Optional[tuple[int, int, int, int]] = None
    object_mask: Optional[np.ndarray] = None
    parts: Optional[list[Part]] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        h, w = self.shape
        if self.bbox is not None:
            x0, y0, x1, y1 = self.bbox
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(f"bbox {self.bbox} invalid for image of size {w}x{h}")
        if self.object_mask is not None and self.object_mask.shape != (h, w):
            raise ValueError(
                f"object_mask shape {self.object_mask.shape} does not match image {(h, w)}"
            )
        if self.parts is not None:
            for part in self.parts:
                if part.visible and not (0 <= part.x < w and 0 <= part.y < h):
                    raise ValueError(f"visible part {part} lies outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def visible_parts(self) -> list[Part]:
        return [p for p in (self.parts or []) if p.visible]


@dataclass
class ManifestEntry:
    image: str
    label: int
    bbox: Optional[tuple[int, int, int, int]] = None
    object_mask: Optional[str] = None
    parts: Optional[list[Part]] = None

    @property
    def image_id(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    class_count: int
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Optional[Path] = None  # directory relative paths resolve against; not serialized

    def resolve(self, relpath: str) -> Path:
        path = Path(relpath)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def to_dict(self) -> dict:
        entries = []
        for entry in self.entries:
            item = {"image": entry.image, "label": entry.label}
            if entry.bbox is not None:
                item["bbox"] = [int(v) for v in entry.bbox]
            if entry.object_mask is not None:
                item["object_mask"] = entry.object_mask
            if entry.parts is not None:
                item["parts"] = [[int(p.part_id), p.x, p.y, bool(p.visible)] for p in entry.parts]
            entries.append(item)
        return {"class_count": self.class_count, "split": self.split, "entries": entries}


def _entry_error(index: int, message: str) -> ManifestError:
    return ManifestError(f"entry {index}: {message}")


def parse_manifest(data: dict, root: Optional[Path] = None) -> DatasetManifest:
    if not isinstance(data, dict):
        raise ManifestError("manifest root must be a JSON object")
    for key in ("class_count", "split", "entries"):
        if key not in data:
            raise ManifestError(f"manifest is missing required field '{key}'")
    class_count = data["class_count"]
    if not isinstance(class_count, int) or isinstance(class_count, bool) or class_count < 1:
        raise ManifestError(f"class_count must be a positive integer, got {class_count!r}")
    split = data["split"]
    if split not in ("train", "test"):
        raise ManifestError(f"split must be 'train' or 'test', got {split!r}")
    if not isinstance(data["entries"], list):
        raise ManifestError("entries must be a list")

    entries = []
    seen_ids = set()
    for i, raw in enumerate(data["entries"]):
        if not isinstance(raw, dict) or "image" not in raw or "label" not in raw:
            raise _entry_error(i, "requires 'image' and 'label'")
        label = raw["label"]
        if not isinstance(label, int) or isinstance(label, bool) or not 0 <= label < class_count:
            raise _entry_error(i, f"label {label!r} outside [0, {class_count})")
        bbox = raw.get("bbox")
        if bbox is not None:
            if len(bbox) != 4:
                raise _entry_error(i, f"bbox must have 4 values, got {bbox!r}")
            bbox = tuple(int(v) for v in bbox)
            if not (bbox[0] < bbox[2] and bbox[1] < bbox[3] and bbox[0] >= 0 and bbox[1] >= 0):
                raise _entry_error(i, f"degenerate bbox {bbox}")
        parts = raw.get("parts")
        if parts is not None:
            try:
                parts = [Part(int(p[0]), p[1], p[2], bool(p[3])) for p in parts]
            except (TypeError, IndexError, ValueError) as exc:
                raise _entry_error(i, f"malformed parts: {exc}") from None
        entry = ManifestEntry(raw["image"], label, bbox, raw.get("object_mask"), parts)
        if entry.image_id in seen_ids:
            raise _entry_error(i, f"duplicate image id '{entry.image_id}'")
        seen_ids.add(entry.image_id)
        entries.append(entry)
    return DatasetManifest(class_count, split, entries, root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return parse_manifest(data, root=path.parent)


def manifest_to_json(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.to_dict(), indent=2) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_to_json(manifest))


def read_image(path) -> np.ndarray:
    """Read an RGB image as float32 [3, H, W] in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_binary_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


def write_binary_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> ImageSample:
    image_path = manifest.resolve(entry.image)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    image = read_image(image_path)
    object_mask = None
    if entry.object_mask is not None:
        object_mask = read_binary_mask(manifest.resolve(entry.object_mask))
    return ImageSample(
        image=image,
        label=entry.label,
        image_id=entry.image_id,
        bbox=entry.bbox,
        object_mask=object_mask,
        parts=list(entry.parts) if entry.parts is not None else None,
    )


def load_samples(manifest: DatasetManifest) -> list[ImageSample]:
    return [load_sample(manifest, entry) for entry in manifest.entries]


def crop_to_bbox(sample: ImageSample) -> ImageSample:
    """Crop a sample to its bounding box and move annotations into the crop frame.

    Parts that fall outside the crop are kept but marked invisible.
    """
    if sample.bbox is None:
        raise ValueError(f"sample '{sample.image_id}' has no bbox to crop to")
    x0, y0, x1, y1 = sample.bbox
    w, h = x1 - x0, y1 - y0
    parts = None
    if sample.parts is not None:
        parts = []
        for p in sample.parts:
            x, y = p.x - x0, p.y - y0
            parts.append(Part(p.part_id, x, y, p.visible and 0 <= x < w and 0 <= y < h))
    object_mask = None
    if sample.object_mask is not None:
        object_mask = sample.object_mask[y0:y1, x0:x1].copy()
    return replace(
        sample,
        image=sample.image[:, y0:y1, x0:x1].copy(),
        bbox=(0, 0, w, h),
        object_mask=object_mask,
        parts=parts,
    )


# --- synthetic dataset ----------------------------------------------------

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.05],
        [0.98, 0.98, 0.98],
    ],
    dtype=np.float32,
)
SHAPES = ("circle", "square", "triangle", "diamond")
PART_NAMES = ("head", "tail", "wing")
_SPLIT_CODES = {"train": 0, "test": 1}


def class_design(label: int) -> dict:
    """(color index, shape index) per part of a synthetic class.

    Head and tail colors are unique per class for up to four classes; the wing
    is shared by all classes and carries no class evidence.
    """
    n_col, n_shape = len(PALETTE), len(SHAPES)
    return {
        "head": (label % n_col, (label + label // n_col) % n_shape),
        "tail": ((label + n_col // 2) % n_col, (label + 2 + label // n_col) % n_shape),
        "wing": None,
    }


WING_COLOR = np.array([0.45, 0.35, 0.25], dtype=np.float32)


def _shape_mask(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.15
    if shape == "triangle":
        # apex up, base at cy + r/2
        return (dy <= r * 0.6) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.65)
    raise ValueError(f"unknown shape {shape!r}")


def _render_sample(rng: np.random.Generator, label: int, res: int) -> tuple:
    h = w = res
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) / res
    base = rng.uniform(0.25, 0.55, size=3).astype(np.float32)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2)).astype(np.float32)
    image = base[:, None, None] + tilt[:, 0, None, None] * xx + tilt[:, 1, None, None] * yy
    image = image + rng.normal(0.0, 0.06, size=(3, h, w)).astype(np.float32)

    body_r = res * rng.uniform(0.13, 0.17)
    margin = body_r * 2.0
    cx = rng.uniform(margin, w - margin)
    cy = rng.uniform(margin * 0.8, h - margin * 0.8)
    facing = 1.0 if rng.random() < 0.5 else -1.0
    body_color = rng.uniform(0.35, 0.6, size=3).astype(np.float32) * np.array([1.0, 0.8, 0.6], np.float32)

    py_, px_ = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    body = ((px_ - cx) / (body_r * 1.3)) ** 2 + ((py_ - cy) / body_r) ** 2 <= 1.0
    image[:, body] = body_color[:, None]
    object_mask = body.copy()

    design = class_design(label)
    part_r = res * 0.1
    centers = {
        "head": (cx + facing * body_r * 1.35, cy - body_r * 0.45),
        "tail": (cx - facing * body_r * 1.35, cy + body_r * 0.25),
        "wing": (cx, cy),
    }
    radii = {"head": part_r, "tail": part_r * 0.9, "wing": part_r * 0.8}
    parts = []
    for part_id, name in enumerate(PART_NAMES):
        px, py = centers[name]
        px += rng.normal(0, res * 0.01)
        py += rng.normal(0, res * 0.01)
        occluded = name == "wing" and rng.random() < 0.15
        if not occluded:
            if design[name] is None:
                color, shape = WING_COLOR, "circle"
            else:
                color, shape = PALETTE[design[name][0]], SHAPES[design[name][1]]
            region = _shape_mask(shape, px, py, radii[name], h, w)
            jitter = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
            image[:, region] = (color + jitter)[:, None]
            object_mask |= region
        ix, iy = int(np.clip(px, 0, w - 1)), int(np.clip(py, 0, h - 1))
        parts.append(Part(part_id, ix, iy, not occluded))

    image = np.clip(image, 0.0, 1.0)
    # quantize so in-memory samples equal their PNG round trip
    image = (np.rint(image * 255.0) / 255.0).astype(np.float32)
    ys, xs = np.nonzero(object_mask)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return image, object_mask, bbox, parts


def generate_synthetic_dataset(
    seed: int,
    classes: int,
    per_class: int,
    resolution: int,
    split: str = "train",
    out_dir=None,
) -> tuple[DatasetManifest, list[ImageSample]]:
    """Generate a deterministic dataset of part-composed objects on textured backgrounds.

    Every sample draws from its own generator keyed on ``(seed, split, class, index)``,
    so sample ``i`` of a class does not depend on ``per_class``. When ``out_dir`` is
    given, images, object masks and ``manifest.json`` are written there.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"need at least 1 sample per class, got {per_class}")
    if resolution < 16:
        raise ValueError(f"resolution {resolution} < 16 gives degenerate views")
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}")

    samples = []
    entries = []
    for label in range(classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, _SPLIT_CODES[split], label, i])
            image, object_mask, bbox, parts = _render_sample(rng, label, resolution)
            image_id = f"{split}_{label:03d}_{i:04d}"
            samples.append(ImageSample(image, label, image_id, bbox, object_mask, parts))
            entries.append(
                ManifestEntry(f"images/{image_id}.png", label, bbox, f"object_masks/{image_id}.png", parts)
            )

    manifest = DatasetManifest(classes, split, entries)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "object_masks").mkdir(parents=True, exist_ok=True)
        for sample, entry in zip(samples, entries):
            write_image(sample.image, out_dir / entry.image)
            write_binary_mask(sample.object_mask, out_dir / entry.object_mask)
        write_manifest(manifest, out_dir / "manifest.json")
        manifest.root = out_dir
    return manifest, samples


def samples_by_class(samples: Sequence[ImageSample]) -> dict[int, list[ImageSample]]:
    groups: dict[int, list[ImageSample]] = {}
    for s in samples:
        groups.setdefault(s.label, []).append(s)
    return groups
