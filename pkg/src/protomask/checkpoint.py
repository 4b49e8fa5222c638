"""Single-file model checkpoints.

The archive is an uncompressed zip holding ``header.json`` and one ``.npy``
per state tensor. Entry timestamps are pinned so that equal weights give
byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, PrototypeModel

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, model: PrototypeModel, seed: int, extra: dict | None = None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "seed": seed,
        "extra": extra or {},
    }
    state = model.state_dict()
    header["tensors"] = sorted(state)
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, indent=2, sort_keys=True).encode())
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            _write_entry(zf, f"tensors/{name}.npy", buf.getvalue())


def read_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def load_checkpoint(path) -> tuple[PrototypeModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise CheckpointError(f"{path} is not a checkpoint archive") from None
    with zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')!r}")
        model = PrototypeModel(ModelConfig.from_dict(header["model_config"]))
        state = {}
        for name in header["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, header
