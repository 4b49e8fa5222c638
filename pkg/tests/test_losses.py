import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from protomask.losses import (LossComponents, LossWeights, cluster_loss, combined_loss, cross_entropy, diversity_loss,
                              l1_head_penalty, separation_loss)
from protomask.model import class_assignment_matrix

T = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731


def test_cross_entropy_cases():
    assert cross_entropy(T([[1.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(T([[0.25] * 4]), torch.tensor([2])).item() == pytest.approx(math.log(4))
    clamped = cross_entropy(T([[1.0, 0.0]]), torch.tensor([1])).item()
    assert clamped == pytest.approx(-math.log(1e-12))
    batch = cross_entropy(T([[0.5, 0.5], [0.9, 0.1]]), torch.tensor([0, 1])).item()
    assert batch == pytest.approx((math.log(2) - math.log(0.1)) / 2)


def test_cluster_examples():
    A = class_assignment_matrix(2, 2).double()
    P = T([[1, 0], [3, 0], [50, 50], [60, 60]])
    Z = T([[[0, 0]]])
    assert cluster_loss(Z, torch.tensor([[True]]), torch.tensor([0]), P, A).item() == 1.0
    A1 = class_assignment_matrix(2, 1).double()
    Z2 = T([[[2, 0], [1, 0]]])
    P1 = T([[0, 0], [90, 90]])
    assert cluster_loss(Z2, torch.tensor([[True, True]]), torch.tensor([0]), P1, A1).item() == 1.0
    assert cluster_loss(Z2, torch.tensor([[True, False]]), torch.tensor([0]), P1, A1).item() == 4.0


def test_separation_examples():
    A = class_assignment_matrix(2, 1).double()
    P = T([[0, 0], [1, 1]])
    Z = T([[[0, 0]]])
    assert separation_loss(Z, torch.tensor([[True]]), torch.tensor([0]), P, A).item() == -2.0
    assert separation_loss(T([[[1, 1]]]), torch.tensor([[True]]), torch.tensor([0]), P, A).item() == 0.0
    with pytest.raises(ValueError):
        separation_loss(Z, torch.tensor([[True]]), torch.tensor([0]), P[:1], class_assignment_matrix(1, 1))


def test_separation_is_cluster_with_complement():
    g = torch.Generator().manual_seed(0)
    Z, P = torch.randn(3, 2, 4, generator=g, dtype=torch.float64), torch.randn(4, 4, generator=g, dtype=torch.float64)
    valid, labels = torch.ones(3, 2, dtype=torch.bool), torch.tensor([0, 1, 1])
    A = class_assignment_matrix(2, 2).double()
    assert separation_loss(Z, valid, labels, P, A).item() == -cluster_loss(Z, valid, labels, P, 1 - A).item()


def test_diversity_examples():
    one = class_assignment_matrix(1, 1).double()
    assert diversity_loss(T([[1.0, 2.0]]), one, 0.5).item() == 1.0
    two = class_assignment_matrix(1, 2).double()
    assert diversity_loss(T([[1.0, 2.0], [1.0, 2.0]]), two, 0.5).item() == 1.0
    assert diversity_loss(T([[0.0, 0.0], [1.0, 0.0]]), two, 0.5).item() == pytest.approx(math.exp(-1), rel=1e-12)
    with pytest.raises(ValueError):
        diversity_loss(T([[0.0]]), one, 0.0)


def test_diversity_single_prototype_zero_gradient():
    P = T([[0.3, -0.2], [1.0, 1.0]]).requires_grad_(True)
    diversity_loss(P, class_assignment_matrix(2, 1).double(), 0.1).backward()
    assert torch.equal(P.grad, torch.zeros_like(P))


def test_combined_examples():
    ones = LossWeights(1, 1, 1, 1)
    assert combined_loss(LossComponents(T(1.0), T(0.5), T(-0.3), T(0.9)), ones).item() == pytest.approx(2.1)
    ce_only = LossWeights(1, 0, 0, 0)
    assert combined_loss((T(0.7), T(5.0), T(-3.0), T(2.0)), ce_only).item() == pytest.approx(0.7)
    with pytest.raises(ValueError):
        LossWeights(lambda_C=0)


def test_l1_examples():
    assert l1_head_penalty(torch.zeros(2, 3)).item() == 0
    assert l1_head_penalty(T([1.0, -2.0])).item() == 3
    W = T([[0.5, -1.5], [2.0, 0.0]])
    assert l1_head_penalty(-3 * W).item() == pytest.approx(3 * l1_head_penalty(W).item())


def _random_case(seed):
    g = torch.Generator().manual_seed(seed)
    Z = torch.randn(3, 3, 4, generator=g, dtype=torch.float64)
    P = torch.randn(6, 4, generator=g, dtype=torch.float64)
    valid = torch.rand(3, 3, generator=g) < 0.7
    valid[:, 0] = True
    labels = torch.randint(0, 3, (3,), generator=g)
    return Z, P, valid, labels, class_assignment_matrix(3, 2).double()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_signs_and_translation_invariance(seed, dx, dy):
    Z, P, valid, labels, A = _random_case(seed)
    clst, sep = cluster_loss(Z, valid, labels, P, A), separation_loss(Z, valid, labels, P, A)
    div = diversity_loss(P, A, 0.1)
    assert clst >= 0 and sep <= 0 and 0 < div <= 3
    shift = T([dx, dy, dx, -dy])
    assert cluster_loss(Z + shift, valid, labels, P + shift, A).item() == pytest.approx(clst.item(), rel=1e-9, abs=1e-9)
    assert separation_loss(Z + shift, valid, labels, P + shift, A).item() == pytest.approx(sep.item(), rel=1e-9,
                                                                                           abs=1e-9)
    assert diversity_loss(P + shift, A, 0.1).item() == pytest.approx(div.item(), rel=1e-9)


def test_diversity_non_increasing_in_distance():
    A = class_assignment_matrix(1, 2).double()
    values = [diversity_loss(T([[0.0, 0.0], [d, 0.0]]), A, 0.1).item() for d in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_invalid_views_ignored():
    A = class_assignment_matrix(2, 1).double()
    P = T([[0.0, 0.0], [10.0, 10.0]])
    Z = T([[[0.0, 0.0], [3.0, 0.0]]])
    assert cluster_loss(Z, torch.tensor([[False, True]]), torch.tensor([0]), P, A).item() == 9.0
    with pytest.raises(ValueError):
        cluster_loss(Z, torch.tensor([[False, False]]), torch.tensor([0]), P, A)
