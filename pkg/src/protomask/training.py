"""Staged optimization: warm-up, joint training, projection, head fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageSample
from .losses import LossWeights, combined_loss, cross_entropy_from_logits, l1_head_penalty, loss_components
from .maskgen import MaskSet, make_views
from .model import PrototypeModel

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_C", "L_clst", "L_sep", "L_div", "L1", "total")
_STAGE_CODES = {"warmup": 1, "joint": 2, "finetune": 3}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    warmup_epochs: int = 5
    joint_epochs: int = 40
    finetune_epochs: int = 10
    warmup_lr: float = 3e-3
    joint_lr_backbone: float = 1e-3
    joint_lr_prototypes: float = 3e-3
    finetune_lr: float = 1e-3
    momentum: float = 0.9
    finetune_momentum: float = 0.0
    batch_size: int = 10
    seed: int = 0
    augment_flip: bool = True
    augment_shift: int = 2

    def __post_init__(self):
        if self.joint_epochs < 1:
            raise ValueError("joint_epochs must be >= 1")
        if min(self.warmup_epochs, self.finetune_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        rates = (self.warmup_lr, self.joint_lr_backbone, self.joint_lr_prototypes, self.finetune_lr)
        if min(rates) <= 0:
            raise ValueError(f"learning rates must be positive, got {rates}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewDataset:
    """Pre-cropped views for a list of images."""

    views: torch.Tensor  # [N, V, 3, Hv, Wv]
    valid: torch.Tensor  # [N, V]
    labels: torch.Tensor  # [N]
    image_ids: list[str]
    provenance: list[list] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample], masksets: Sequence[MaskSet], count: int,
                     view_resolution: tuple[int, int], mask_background: bool = False) -> "ViewDataset":
        if len(samples) != len(masksets):
            raise ValueError(f"{len(samples)} samples but {len(masksets)} mask sets")
        batches = [make_views(s, m, count, view_resolution, mask_background) for s, m in zip(samples, masksets)]
        return cls(
            torch.from_numpy(np.stack([b.views for b in batches])),
            torch.from_numpy(np.stack([b.valid for b in batches])),
            torch.tensor([s.label for s in samples], dtype=torch.long),
            [s.image_id for s in samples],
            [b.provenance for b in batches],
        )


@dataclass
class ProjectionEntry:
    prototype: int
    image_id: str
    view_index: int
    distance: float  # squared distance moved by the projection


@dataclass
class ProjectionRecord:
    entries: list[ProjectionEntry]

    def to_json(self) -> str:
        return json.dumps({"prototypes": [asdict(e) for e in self.entries]}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ProjectionRecord":
        return cls([ProjectionEntry(**e) for e in json.loads(text)["prototypes"]])


def init_head(class_assignment: torch.Tensor) -> torch.Tensor:
    """Head weights: 1 where a prototype belongs to the class, 0 elsewhere."""
    return class_assignment.detach().clone().to(torch.float32)


def reset_head(model: PrototypeModel) -> PrototypeModel:
    with torch.no_grad():
        model.head.copy_(init_head(model.class_assignment))
    return model


def _generator(seed: int, stage: str) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 10 + _STAGE_CODES[stage])


def augment(views: torch.Tensor, gen: torch.Generator, flip: bool, shift: int) -> torch.Tensor:
    """Random horizontal flips and small translations, drawn per view."""
    if flip:
        do_flip = torch.rand(views.shape[:-3], generator=gen) < 0.5
        views = torch.where(do_flip[..., None, None, None], views.flip(-1), views)
    if shift > 0:
        h, w = views.shape[-2:]
        flat = views.reshape(-1, *views.shape[-3:])
        padded = torch.nn.functional.pad(flat, (shift, shift, shift, shift), mode="replicate")
        offsets = torch.randint(0, 2 * shift + 1, (flat.shape[0], 2), generator=gen)
        out = torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets.tolist())])
        views = out.reshape(views.shape)
    return views


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _check_finite(value: torch.Tensor, stage: str, epoch: int, parts) -> None:
    if not torch.isfinite(value):
        detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items())
        raise TrainingDivergedError(f"non-finite loss in {stage} epoch {epoch}: {detail}")


def _train_epochs(model: PrototypeModel, data: ViewDataset, schedule: ScheduleConfig, weights: LossWeights,
                  optimizer: torch.optim.Optimizer, epochs: int, stage: str, log_rows: list,
                  epoch_offset: int) -> None:
    gen = _generator(schedule.seed, stage)
    for epoch in range(epochs):
        sums = np.zeros(5)
        for idx in _batches(len(data), schedule.batch_size, gen):
            views = augment(data.views[idx], gen, schedule.augment_flip, schedule.augment_shift)
            valid, labels = data.valid[idx], data.labels[idx]
            comps = loss_components(model.embed(views), valid, labels, model.prototypes,
                                    model.class_assignment, model.head, weights.alpha, model.eps)
            total = combined_loss(comps, weights)
            _check_finite(total, stage, epoch + 1, comps._asdict())
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums += len(idx) * np.array([c.detach().item() for c in comps] + [total.detach().item()])
        means = sums / len(data)
        row = {"epoch": epoch_offset + epoch + 1, "L_C": means[0], "L_clst": means[1], "L_sep": means[2],
               "L_div": means[3], "L1": float(l1_head_penalty(model.head)), "total": means[4]}
        log_rows.append(row)
        log.info("%s epoch %d: %s", stage, row["epoch"], row)


def _set_trainable(model: PrototypeModel, features: bool, proj: bool, prototypes: bool, head: bool) -> None:
    for p in model.backbone.features.parameters():
        p.requires_grad_(features)
    for p in model.backbone.proj.parameters():
        p.requires_grad_(proj)
    model.prototypes.requires_grad_(prototypes)
    model.head.requires_grad_(head)


def warmup_stage(model: PrototypeModel, data: ViewDataset, schedule: ScheduleConfig, weights: LossWeights,
                 log_rows: Optional[list] = None, epoch_offset: int = 0) -> PrototypeModel:
    """Fit prototypes and the embedding projection with conv weights and head frozen."""
    log_rows = [] if log_rows is None else log_rows
    if schedule.warmup_epochs == 0:
        return model
    _set_trainable(model, features=False, proj=True, prototypes=True, head=False)
    params = list(model.backbone.proj.parameters()) + [model.prototypes]
    opt = torch.optim.SGD(params, lr=schedule.warmup_lr, momentum=schedule.momentum)
    _train_epochs(model, data, schedule, weights, opt, schedule.warmup_epochs, "warmup", log_rows, epoch_offset)
    return model


def joint_stage(model: PrototypeModel, data: ViewDataset, schedule: ScheduleConfig, weights: LossWeights,
                log_rows: Optional[list] = None, epoch_offset: int = 0) -> PrototypeModel:
    """Train backbone and prototypes on the combined objective; the head stays fixed."""
    log_rows = [] if log_rows is None else log_rows
    _set_trainable(model, features=True, proj=True, prototypes=True, head=False)
    opt = torch.optim.SGD(
        [
            {"params": list(model.backbone.parameters()), "lr": schedule.joint_lr_backbone},
            {"params": [model.prototypes], "lr": schedule.joint_lr_prototypes},
        ],
        lr=schedule.joint_lr_backbone,
        momentum=schedule.momentum,
    )
    _train_epochs(model, data, schedule, weights, opt, schedule.joint_epochs, "joint", log_rows, epoch_offset)
    return model


@torch.no_grad()
def embed_dataset(model: PrototypeModel, data: ViewDataset, batch_size: int = 32) -> torch.Tensor:
    """[N, V, D] embeddings of the un-augmented views."""
    out = [model.embed(data.views[i:i + batch_size]) for i in range(0, len(data), batch_size)]
    return torch.cat(out)


@torch.no_grad()
def pooled_dataset(model: PrototypeModel, data: ViewDataset, batch_size: int = 32) -> torch.Tensor:
    Z = embed_dataset(model, data, batch_size)
    return model.head_from(Z, data.valid).pooled


@torch.no_grad()
def project_prototypes(model: PrototypeModel, data: ViewDataset,
                       batch_size: int = 32) -> tuple[PrototypeModel, ProjectionRecord]:
    """Move every prototype onto its nearest same-class training view embedding.

    Embeddings come from one frozen sweep. Candidates are scanned in (image,
    view) order and the first minimizer wins ties.
    """
    Z = embed_dataset(model, data, batch_size)
    owner = model.prototype_classes()
    entries = []
    for k in range(model.num_classes):
        image_idx = torch.nonzero(data.labels == k).flatten()
        cand, where = [], []
        for i in image_idx.tolist():
            for v in torch.nonzero(data.valid[i]).flatten().tolist():
                cand.append(Z[i, v])
                where.append((i, v))
        protos = torch.nonzero(owner == k).flatten().tolist()
        if not cand:
            if protos:
                raise ValueError(f"class {k} has no training views to project onto")
            continue
        cand = torch.stack(cand)
        for j in protos:
            d2 = ((cand - model.prototypes[j]) ** 2).sum(-1)
            best = int(d2.argmin())
            i, v = where[best]
            model.prototypes[j] = cand[best]
            entries.append(ProjectionEntry(j, data.image_ids[i], v, float(d2[best])))
    entries.sort(key=lambda e: e.prototype)
    return model, ProjectionRecord(entries)


def finetune_head(model: PrototypeModel, data: ViewDataset, schedule: ScheduleConfig, lambda_l1: float,
                  log_rows: Optional[list] = None, epoch_offset: int = 0) -> PrototypeModel:
    """Fit the head alone on cross-entropy plus an L1 penalty.

    Backbone and prototypes are frozen, so pooled similarities are computed
    once. Each SGD step on the cross-entropy is followed by the L1 proximal
    step (soft thresholding), which keeps weights that the data does not
    support at exactly zero.
    """
    log_rows = [] if log_rows is None else log_rows
    if schedule.finetune_epochs == 0:
        return model
    _set_trainable(model, features=False, proj=False, prototypes=False, head=True)
    pooled = pooled_dataset(model, data)
    opt = torch.optim.SGD([model.head], lr=schedule.finetune_lr, momentum=schedule.finetune_momentum)
    gen = _generator(schedule.seed, "finetune")
    shrink = schedule.finetune_lr * lambda_l1
    for epoch in range(schedule.finetune_epochs):
        ce_sum = 0.0
        for idx in _batches(len(data), schedule.batch_size, gen):
            ce = cross_entropy_from_logits(pooled[idx] @ model.head.T, data.labels[idx])
            _check_finite(ce, "finetune", epoch + 1, {"L_C": ce})
            opt.zero_grad()
            ce.backward()
            opt.step()
            with torch.no_grad():
                model.head.copy_(torch.sign(model.head) * (model.head.abs() - shrink).clamp_min(0.0))
            ce_sum += ce.item() * len(idx)
        with torch.no_grad():
            l1 = float(l1_head_penalty(model.head))
        ce_mean = ce_sum / len(data)
        log_rows.append({"epoch": epoch_offset + epoch + 1, "L_C": ce_mean, "L_clst": "", "L_sep": "",
                         "L_div": "", "L1": l1, "total": ce_mean + lambda_l1 * l1})
    model.head.requires_grad_(False)
    return model


def write_log(rows: list, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if v != "" else "") for k, v in row.items() if k != "epoch"}
                            | {"epoch": row["epoch"]})


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = []
        for row in csv.DictReader(f):
            rows.append({k: (int(v) if k == "epoch" else (float(v) if v != "" else "")) for k, v in row.items()})
        return rows


@dataclass
class TrainResult:
    model: PrototypeModel
    log_rows: list
    projection: ProjectionRecord


def run_schedule(model: PrototypeModel, data: ViewDataset, schedule: ScheduleConfig, weights: LossWeights,
                 out_dir=None, resume: bool = False, extra: Optional[dict] = None) -> TrainResult:
    """Warm-up, joint training, projection and head fine-tuning.

    With ``out_dir`` set, writes ``checkpoint.bin``, ``train_log.csv`` and
    ``projection.json`` there, plus ``checkpoint_projected.bin`` after the
    projection. ``resume=True`` restarts from that intermediate checkpoint
    when it exists and only runs the fine-tune stage.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    projected_path = out_dir / "checkpoint_projected.bin" if out_dir else None
    extra = dict(extra or {})
    extra.setdefault("schedule", schedule.to_dict())
    extra.setdefault("loss_weights", weights.to_dict())

    if resume and projected_path is not None and projected_path.exists():
        model, _ = load_checkpoint(projected_path)
        rows = read_log(out_dir / "train_log.csv")[: schedule.warmup_epochs + schedule.joint_epochs]
        projection = ProjectionRecord.from_json((out_dir / "projection.json").read_text())
        log.info("resuming from %s", projected_path)
    else:
        rows = []
        reset_head(model)
        warmup_stage(model, data, schedule, weights, rows, 0)
        joint_stage(model, data, schedule, weights, rows, schedule.warmup_epochs)
        model, projection = project_prototypes(model, data)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(projected_path, model, schedule.seed, extra)
            write_log(rows, out_dir / "train_log.csv")
            (out_dir / "projection.json").write_text(projection.to_json())

    finetune_head(model, data, schedule, weights.lambda_l1, rows, schedule.warmup_epochs + schedule.joint_epochs)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", model, schedule.seed, extra)
        write_log(rows, out_dir / "train_log.csv")
    _set_trainable(model, features=True, proj=True, prototypes=True, head=False)
    return TrainResult(model, rows, projection)


def accuracy(model: PrototypeModel, data: ViewDataset) -> float:
    with torch.no_grad():
        Z = embed_dataset(model, data)
        logits = model.head_from(Z, data.valid).logits
    return 100.0 * float((logits.argmax(-1) == data.labels).float().mean())

