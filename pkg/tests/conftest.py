import time
from pathlib import Path

import pytest
import torch

from protomask.config import load_config
from protomask.data import generate_synthetic_dataset
from protomask.maskgen import toy_grid_segmenter, with_full_frame
from protomask.model import BackboneConfig, ModelConfig, build_model
from protomask.training import ViewDataset, run_schedule

torch.set_num_threads(1)

CONFIG_PATH = Path(__file__).resolve().parents[1] / "configs" / "synthetic.json"

_criteria: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    _criteria.append((name, passed, detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def segment(samples, full_frame=True):
    masks = [toy_grid_segmenter(s, 2, 2) for s in samples]
    return [with_full_frame(m) for m in masks] if full_frame else masks


class SyntheticSplit:
    def __init__(self, samples, masksets, data):
        self.samples = samples
        self.masksets = masksets
        self.data = data


def make_split(seed, per_class, split, view_count, resolution):
    _, samples = generate_synthetic_dataset(seed, 4, per_class, 64, split)
    masksets = segment(samples)
    return SyntheticSplit(samples, masksets, ViewDataset.from_samples(samples, masksets, view_count, resolution))


@pytest.fixture(scope="session")
def run_config():
    return load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def synthetic(run_config):
    res = run_config.view_resolution
    train = make_split(run_config.seed, 25, "train", 5, res)
    test = make_split(run_config.seed, 10, "test", 5, res)
    return train, test


def train_synthetic(run_config, train, out_dir):
    cfg = ModelConfig(4, run_config.model.prototypes_per_class, run_config.model.eps, run_config.model.backbone)
    model = build_model(cfg, run_config.seed)
    start = time.perf_counter()
    result = run_schedule(model, train.data, run_config.schedule, run_config.loss_weights, out_dir,
                          extra={"view_count": 5, "view_resolution": list(run_config.view_resolution)})
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained(run_config, synthetic, tmp_path_factory):
    """The end-to-end synthetic run, shared by every test that needs a trained model."""
    out = tmp_path_factory.mktemp("run_a")
    result, seconds = train_synthetic(run_config, synthetic[0], out)
    return result, out, seconds


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(3, 2, backbone=BackboneConfig(widths=(4, 8), embedding_dim=6, input_resolution=(16, 16)))
    return build_model(cfg, 0)
