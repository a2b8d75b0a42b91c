"""Self-describing checkpoint files: a JSON header plus named float64 arrays in one ``.npz``."""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_TAG = "portrait-iqa-checkpoint/1"
_META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model: nn.Module, meta: dict | None = None) -> None:
    header = {"format": FORMAT_TAG, "model": model.name, "config": model.config, **(meta or {})}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if _META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing checkpoint header")
    header = json.loads(arrays.pop(_META_KEY).tobytes().decode("utf-8"))
    if header.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: format {header.get('format')!r}, expected {FORMAT_TAG!r}")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    from . import build_model

    header, arrays = read_checkpoint(path)
    model = build_model(header["model"], **header["config"])
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model, header
