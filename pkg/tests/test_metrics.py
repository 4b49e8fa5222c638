import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protomask import metrics
from protomask.data import ImageSample, Part
from protomask.metrics import MetricConfig, MetricReport


def test_classification_scores_cases():
    labels = np.array([0, 1, 2])
    assert metrics.classification_scores(np.eye(3), labels) == (100.0, 100.0, 100.0)
    # true label always ranked second
    logits = np.array([[0.5, 0.9, 0.1, 0.0], [0.0, 0.5, 0.9, 0.1], [0.9, 0.0, 0.5, 0.1]])
    acc, top3, _ = metrics.classification_scores(logits, labels)
    assert (acc, top3) == (0.0, 100.0)
    # confusion [[1, 1], [1, 1]]
    two = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert metrics.classification_scores(two, np.array([0, 0, 1, 1]))[2] == pytest.approx(50.0)
    with pytest.raises(ValueError):
        metrics.classification_scores(np.zeros((0, 2)), np.array([], int))


def test_head_metrics_cases():
    assert metrics.global_size(np.zeros((2, 3))) == 0
    assert metrics.global_size(np.array([[0.5, 0, 0], [0, 0.5, 0.5]])) == 3
    assert metrics.sparsity(np.zeros((2, 3))) == 100.0
    assert metrics.sparsity(np.array([[1.0, 0.0], [0.0, 1.0]])) == 50.0
    assert metrics.npr(np.array([[1.0, 2.0]])) == 0.0
    assert metrics.npr(np.array([[-1.0, 1.0]])) == 1.0
    assert metrics.npr(np.array([[-1.0, -1.0, 4.0]])) == 2.0
    with pytest.raises(ValueError):
        metrics.npr(np.array([[-1.0, 0.0]]))
    with pytest.raises(ValueError):
        metrics.sparsity(np.ones((1, 1)), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_head_metrics_monotone_in_eps(seed, e1, e2):
    head = np.random.default_rng(seed).normal(size=(3, 6))
    lo, hi = sorted((e1, e2))
    assert metrics.global_size(head, hi) <= metrics.global_size(head, lo)
    assert metrics.sparsity(head, hi) >= metrics.sparsity(head, lo)


def test_top5_cases():
    idx, complete = metrics.top5_prototypes(np.array([9, 1, 8, 2, 7, 3, 6]))
    assert idx.tolist() == [0, 2, 4, 6, 5] and complete
    assert metrics.top5_prototypes(np.ones(7))[0].tolist() == [0, 1, 2, 3, 4]
    idx, complete = metrics.top5_prototypes(np.array([1.0, 3.0]))
    assert idx.tolist() == [1, 0] and not complete


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=5, max_size=12))
def test_top5_invariant_under_increasing_transform(pooled):
    # integer grid keeps ties exact under the transforms
    pooled = np.array(pooled, dtype=np.float64) / 4
    a = metrics.top5_prototypes(pooled)[0]
    assert a.tolist() == metrics.top5_prototypes(3 * pooled + 1)[0].tolist()
    assert a.tolist() == metrics.top5_prototypes(np.exp(pooled))[0].tolist()


def test_vlc_cases(caplog):
    box = (0, 0, 4, 4)
    assert metrics.vlc([[box] * 5]) == 0.0
    assert metrics.vlc([[(0, 0, 1, 1), (2, 2, 3, 3), (4, 4, 5, 5)]]) == 100.0
    # intersection 4, union 8 -> IoU 0.5 (pixel count: 2x4 overlap of two 4x2 boxes)
    assert metrics.vlc([[(0, 0, 4, 2), (2, 0, 6, 2)]]) == pytest.approx(100 * (1 - 1 / 3))
    assert metrics.vlc([[(0, 0, 4, 2), (0, 0, 4, 4)]]) == pytest.approx(50.0)
    assert metrics.vlc([[box, (1, 1, 1, 3), box]]) == 0.0
    assert "zero-area" in caplog.text
    with pytest.raises(ValueError):
        metrics.vlc([[box]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-5, 5), st.integers(-5, 5))
def test_vlc_translation_invariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(5):
        x0, y0 = rng.integers(0, 8, 2)
        boxes.append((int(x0), int(y0), int(x0 + rng.integers(1, 5)), int(y0 + rng.integers(1, 5))))
    moved = [(a + dx, b + dy, c + dx, d + dy) for a, b, c, d in boxes]
    assert metrics.vlc([boxes]) == pytest.approx(metrics.vlc([moved]), abs=1e-12)


def test_apd_cases():
    A2 = np.array([[1, 1, 0], [0, 0, 1]])
    intra, inter = metrics.apd(np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]), A2)
    assert intra == pytest.approx(0.0) and inter == pytest.approx(1.0)
    _, inter = metrics.apd(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([[1, 0], [0, 1]]))
    assert inter == pytest.approx(2.0)
    intra, _ = metrics.apd(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([[1, 0], [0, 1]]))
    assert math.isnan(intra)
    with pytest.raises(ValueError):
        metrics.apd(np.array([[0.0, 0.0], [1.0, 0.0]]), A2[:, :2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_apd_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(6, 4))
    A = np.repeat(np.eye(3), 2, axis=1)
    scaled = P * rng.uniform(0.1, 10, size=(6, 1))
    np.testing.assert_allclose(metrics.apd(P, A), metrics.apd(scaled, A), atol=1e-12)


def test_region_object_stats_cases():
    obj = np.zeros((4, 4), bool)
    obj[:, :2] = True
    inside = np.zeros((4, 4), bool)
    inside[0, 0] = True
    assert metrics.region_object_stats(inside, obj) == (100.0, 0.0)
    assert metrics.region_object_stats(~obj, obj) == (0.0, 100.0)
    half = np.zeros((4, 4), bool)
    half[0, 1:3] = True
    assert metrics.region_object_stats(half, obj) == (50.0, 50.0)
    with pytest.raises(ValueError):
        metrics.region_object_stats(np.zeros((4, 4), bool), obj)


def test_iord_cases():
    obj = np.zeros((4, 4), bool)
    obj[:, :2] = True
    rel = obj.astype(float) * 3.0
    assert metrics.iord(rel, obj) == pytest.approx(1.0)
    assert metrics.iord(np.ones((4, 4)), obj) == 0.0
    assert metrics.iord(rel[:, ::-1], obj) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        metrics.iord(rel, np.ones((4, 4), bool))


def test_consistency_cases():
    assert metrics.consistency({0: [frozenset({1})] * 4}) == 100.0
    assert metrics.consistency({0: [frozenset()] * 3}) == 0.0
    assert metrics.consistency({0: [frozenset({1, 2}), frozenset({2, 3})]}) == 100.0
    assert metrics.consistency({0: [frozenset({1})], 1: [frozenset({1}), frozenset({2})]}) == 0.0
    assert metrics.consistency({0: [frozenset({1})]}) is None


def test_parts_in_region():
    s = ImageSample(np.zeros((3, 4, 4), np.float32), 0, "p",
                    parts=[Part(0, 1.0, 1.0, True), Part(1, 3.0, 3.0, True), Part(2, 1.0, 1.0, False)])
    region = np.zeros((4, 4), bool)
    region[:2, :2] = True
    assert metrics.parts_in_region(s, region) == frozenset({0})


def test_report_serialization(tmp_path):
    r = MetricReport(90.0, 100.0, 89.5, 40, 75.0, 0.0, 30.0, float("nan"), 0.2)
    d = json.loads(r.to_json())
    assert d["apd_intra"] is None and d["consistency"] is None
    back = MetricReport.from_json(r.to_json())
    assert back.to_json() == r.to_json()
    lines = r.to_csv().splitlines()
    assert lines[0].split(",")[:6] == ["accuracy", "top3_accuracy", "f1_macro", "global_size", "sparsity", "npr"]
    assert lines[1].split(",")[3] == "40"


def test_aggregate_reports():
    a = MetricReport(90.0, 100.0, 90.0, 40, 70.0, 0.0, 30.0, 0.1, 0.2)
    b = MetricReport(80.0, 100.0, 80.0, 38, 80.0, 0.5, 20.0, 0.3, 0.4, consistency=50.0)
    agg = metrics.aggregate_reports([a, b])
    assert agg["accuracy"] == (85.0, 5.0)
    assert agg["consistency"] == (None, None)
    assert metrics.aggregate_reports([a])["sparsity"] == (70.0, 0.0)


def test_evaluate_trained_model(synthetic, trained):
    test = synthetic[1]
    model = trained[0].model
    report = metrics.evaluate(model, test.samples, test.masksets, MetricConfig(5, (32, 32)))
    d = report.to_dict()
    assert all(v is not None for v in d.values())
    for key in ("accuracy", "top3_accuracy", "f1_macro", "sparsity", "object_overlap", "background_overlap",
                "consistency"):
        assert 0.0 <= d[key] <= 100.0
    assert report.object_overlap + report.background_overlap == pytest.approx(100.0)
    assert report.global_size <= model.num_prototypes
    assert MetricReport.from_json(report.to_json()) == report


def test_evaluate_without_annotations(synthetic, trained):
    test = synthetic[1]
    bare = [ImageSample(s.image, s.label, s.image_id) for s in test.samples[:6]]
    report = metrics.evaluate(trained[0].model, bare, test.masksets[:6], MetricConfig(5, (32, 32)))
    assert report.consistency is None and report.object_overlap is None and report.iord is None
    assert report.vlc is not None
