"""Versioned JSON container for model, backbone, imaginer and tuned-feature checkpoints.

Layout::

    {"magic": "VLADAPT1", "kind": "model", "meta": {...},
     "tensors": {"name": {"shape": [r, c], "data": [row-major floats]}}}

Floats are written with ``repr`` precision so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import InputError

MAGIC = "VLADAPT1"


def save_container(path, kind: str, meta: Mapping, tensors: Mapping) -> Path:
    path = Path(path)
    payload = {"magic": MAGIC, "kind": kind, "meta": dict(meta), "tensors": {}}
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        payload["tensors"][name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return path


def load_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("magic") != MAGIC:
        raise InputError(f"{path} is not a {MAGIC} checkpoint")
    if kind is not None and payload.get("kind") != kind:
        raise InputError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    try:
        tensors = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["tensors"].items()
        }
        return payload["meta"], tensors
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed checkpoint ({exc})") from None


def save_model(path, model, vocab=None) -> Path:
    meta = {"config": model.cfg.to_dict()}
    if vocab is not None:
        meta["vocab"] = vocab.to_list()
    return save_container(path, "model", meta, model.state_dict())


def load_model(path):
    """Return ``(VLEncoder, Vocab | None)``."""
    from .model import ModelConfig, VLEncoder, Vocab

    meta, tensors = load_container(path, "model")
    model = VLEncoder(ModelConfig.from_dict(meta["config"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise InputError(f"{path}: parameters do not match the stored config ({exc})") from None
    vocab = Vocab.from_list(meta["vocab"]) if "vocab" in meta else None
    return model, vocab


def save_features(path, visual) -> Path:
    tensors = {"features": visual.features}
    if visual.boxes is not None:
        tensors["boxes"] = visual.boxes
    return save_container(path, "features", {}, tensors)


def load_features(path):
    from .model import VisualFeatureSet

    _, tensors = load_container(path, "features")
    return VisualFeatureSet(tensors["features"], tensors.get("boxes"))
