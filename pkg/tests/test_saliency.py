import numpy as np
import pytest
import torch

from protomask.data import ImageSample
from protomask.maskgen import MaskSet, SegmentationMask, make_views, toy_grid_segmenter, with_full_frame
from protomask.saliency import RelevanceMap, heatmap_overlay, map_to_image, prototype_saliency, threshold_region


@pytest.fixture
def batch(tiny_model):
    img = np.random.default_rng(3).random((3, 24, 24)).astype(np.float32)
    s = ImageSample(img, 0, "x")
    return s, make_views(s, with_full_frame(toy_grid_segmenter(s, 2, 2)), 6, (16, 16))


def test_relevance_confined_to_argmax_view(tiny_model, batch):
    _, vb = batch
    for p in range(tiny_model.num_prototypes):
        rel = prototype_saliency(tiny_model, vb, p)
        assert rel.values.min() >= 0 and rel.values.max() == pytest.approx(1.0)
        others = np.delete(rel.per_view, rel.view_index, axis=0)
        assert not others.any()
        assert rel.provenance == vb.provenance[rel.view_index]


def test_non_winning_views_get_zero_gradient(tiny_model, batch):
    _, vb = batch
    views, valid = torch.from_numpy(vb.views), torch.from_numpy(vb.valid)
    with torch.no_grad():
        base = tiny_model(views, valid)
    losers = sorted(set(range(5)) - set(base.argmax_view.tolist()))
    assert losers
    x = views.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(tiny_model(x, valid).logits.sum(), x)
    assert not grad[losers].any()


def test_saliency_errors(tiny_model, batch):
    _, vb = batch
    with pytest.raises(IndexError):
        prototype_saliency(tiny_model, vb, 99)
    empty = type(vb)(vb.views, np.zeros_like(vb.valid), vb.provenance, vb.image_shape)
    with pytest.raises(ValueError):
        prototype_saliency(tiny_model, empty, 0)


def test_saliency_deterministic(tiny_model, batch):
    _, vb = batch
    a, b = prototype_saliency(tiny_model, vb, 2), prototype_saliency(tiny_model, vb, 2)
    np.testing.assert_array_equal(a.values, b.values)


def test_map_to_image_placement():
    rel = RelevanceMap(np.ones((4, 4)), 0, (0, 0, 8, 8))
    full = map_to_image(rel, (8, 8))
    assert (full > 0).all()
    rel = RelevanceMap(np.ones((4, 4)), 0, (2, 1, 6, 4))
    full = map_to_image(rel, (8, 8))
    assert np.count_nonzero(full) <= 4 * 3
    assert not full[:1].any() and not full[:, :2].any()
    with pytest.raises(ValueError):
        map_to_image(RelevanceMap(np.ones((2, 2)), 0, (0, 0, 9, 4)), (8, 8))


def test_map_to_image_integer_upscale_preserves_mean():
    # constant map upscaled by an exact integer factor: sum grows by the area factor
    rel = RelevanceMap(np.full((4, 4), 0.5), 0, (0, 0, 12, 12))
    full = map_to_image(rel, (12, 12))
    assert full.sum() == pytest.approx(0.5 * 16 * 9, rel=0.01)


def test_threshold_region_cases():
    rel = np.zeros((10, 10))
    rel.flat[:100] = np.arange(1, 101)
    region, box = threshold_region(rel, 95)
    assert region.sum() == np.count_nonzero(rel >= np.sort(rel.ravel())[int(0.95 * 99)])
    assert region.flat[99] and not region.flat[0]
    const = np.zeros((6, 6))
    const[1:4, 2:5] = 0.7
    region, box = threshold_region(const, 90)
    assert region.sum() == 9 and box == (2, 1, 5, 4)
    sparse = np.zeros((5, 5))
    sparse[1, 1], sparse[3, 3] = 0.2, 1.0
    region, _ = threshold_region(sparse, 1e-9)
    assert region.sum() == 2
    with pytest.raises(ValueError):
        threshold_region(np.zeros((3, 3)), 95)
    with pytest.raises(ValueError):
        threshold_region(sparse, 100)


def test_threshold_region_scale_invariant():
    rel = np.random.default_rng(0).random((12, 12))
    a, _ = threshold_region(rel, 80)
    b, _ = threshold_region(rel * 7.5, 80)
    np.testing.assert_array_equal(a, b)


def test_heatmap_overlay():
    img = np.zeros((3, 4, 4), np.float32)
    rel = np.zeros((4, 4))
    rel[0, 0] = 2.0
    rgba = heatmap_overlay(img, rel)
    assert rgba.shape == (4, 4, 4) and rgba.dtype == np.uint8
    assert tuple(rgba[0, 0]) == (255, 0, 0, 255)
    assert rgba[1, 1, 0] == 0


def test_full_image_mask_provenance(tiny_model):
    img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    s = ImageSample(img, 0, "y")
    vb = make_views(s, MaskSet([SegmentationMask.from_array(np.ones((16, 16), bool))]), 2, (16, 16))
    rel = prototype_saliency(tiny_model, vb, 0)
    assert rel.view_index == 0 and rel.provenance == (0, 0, 16, 16)
