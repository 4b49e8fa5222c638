"""Training objectives.

All distance terms use squared L2 distance between view embeddings and
prototypes. Where a min has ties, the gradient follows the lowest-index
minimizer so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Union

import torch
import torch.nn.functional as F

from .model import max_pool, similarity_from_distance, squared_distances

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_C: float = 1.0
    lambda_cl: float = 0.8
    lambda_sep: float = 0.08
    lambda_div: float = 0.1
    alpha: float = 0.1
    lambda_l1: float = 1e-4

    def __post_init__(self):
        if self.lambda_C <= 0:
            raise ValueError(f"lambda_C must be positive, got {self.lambda_C}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be non-negative, got {self.lambda_l1}")

    def to_dict(self) -> dict:
        return asdict(self)


class LossComponents(NamedTuple):
    ce: torch.Tensor
    cluster: torch.Tensor
    separation: torch.Tensor
    diversity: torch.Tensor


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true labels, probabilities floored at 1e-12."""
    p_true = probs.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


def cross_entropy_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def _owned(labels: torch.Tensor, class_assignment: torch.Tensor) -> torch.Tensor:
    """[B, |P|] True where the prototype belongs to the sample's class."""
    return class_assignment[labels] > 0


def _nearest_distance(Z, valid, P, allowed) -> torch.Tensor:
    """min over allowed prototypes of min over valid views of ||z - p||^2 -> [B]."""
    d2 = squared_distances(Z, P)  # [B, |P|, V]
    d2 = d2.masked_fill(~valid.unsqueeze(-2), float("inf"))
    view_idx = d2.argmin(dim=-1, keepdim=True)
    per_proto = d2.gather(-1, view_idx).squeeze(-1)  # [B, |P|]
    per_proto = per_proto.masked_fill(~allowed, float("inf"))
    proto_idx = per_proto.argmin(dim=-1, keepdim=True)
    return per_proto.gather(-1, proto_idx).squeeze(-1)


def _check_views(valid: torch.Tensor) -> torch.Tensor:
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if not bool(valid.any(dim=-1).all()):
        raise ValueError("every sample needs at least one valid view")
    return valid


def cluster_loss(Z: torch.Tensor, valid: torch.Tensor, labels: torch.Tensor, prototypes: torch.Tensor,
                 class_assignment: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the squared distance between the closest valid view
    and the closest prototype of the sample's own class."""
    valid = _check_views(valid)
    owned = _owned(labels, class_assignment)
    if not bool(owned.any(dim=-1).all()):
        missing = sorted(set(labels[~owned.any(dim=-1)].tolist()))
        raise ValueError(f"classes {missing} own no prototypes")
    return _nearest_distance(Z, valid, prototypes, owned).mean()


def separation_loss(Z: torch.Tensor, valid: torch.Tensor, labels: torch.Tensor, prototypes: torch.Tensor,
                    class_assignment: torch.Tensor) -> torch.Tensor:
    """Negated mean squared distance to the closest prototype of any other class."""
    valid = _check_views(valid)
    foreign = ~_owned(labels, class_assignment)
    if not bool(foreign.any(dim=-1).all()):
        raise ValueError("separation loss needs prototypes of more than one class")
    return -_nearest_distance(Z, valid, prototypes, foreign).mean()


def diversity_loss(prototypes: torch.Tensor, class_assignment: torch.Tensor, alpha: float) -> torch.Tensor:
    """Sum over classes of exp(-alpha * sum of squared distances over ordered
    same-class prototype pairs)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    d2 = squared_distances(prototypes, prototypes)
    A = class_assignment.to(prototypes.dtype)
    per_class = torch.einsum("ki,ij,kj->k", A, d2, A)
    return torch.exp(-alpha * per_class).sum()


def combined_loss(components: Union[LossComponents, tuple], weights: LossWeights) -> torch.Tensor:
    ce, clst, sep, div = components
    return (weights.lambda_C * ce + weights.lambda_cl * clst
            + weights.lambda_sep * sep + weights.lambda_div * div)


def l1_head_penalty(head: torch.Tensor) -> torch.Tensor:
    return head.abs().sum()


def loss_components(Z: torch.Tensor, valid: torch.Tensor, labels: torch.Tensor, prototypes: torch.Tensor,
                    class_assignment: torch.Tensor, head: torch.Tensor, alpha: float,
                    eps: float) -> LossComponents:
    """All four joint-training terms from embeddings ``Z`` [B, V, D].

    The classification term runs the full similarity, max-pool and head path.
    """
    valid = _check_views(valid)
    sim = similarity_from_distance(squared_distances(Z, prototypes), eps)
    pooled, _ = max_pool(sim, valid)
    logits = pooled @ head.T
    return LossComponents(
        cross_entropy_from_logits(logits, labels),
        cluster_loss(Z, valid, labels, prototypes, class_assignment),
        separation_loss(Z, valid, labels, prototypes, class_assignment),
        diversity_loss(prototypes, class_assignment, alpha),
    )
