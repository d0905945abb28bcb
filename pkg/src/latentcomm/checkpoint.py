"""Versioned checkpoint container.

A checkpoint is a plain dict serialized with torch.save: format version,
kind ("stage1" / "stage2"), config snapshot (canonical ini text + hash),
schedule beta table (stage 2 only), named parameter tensors, optimizer
state, epoch counter and RNG state. The parameter fingerprint identifies
a trained model independent of serialization details; stage-2
checkpoints store the fingerprint of the stage-1 model they were trained
against and inference refuses mismatched pairs.
"""

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, incompatible or mismatched checkpoint."""


def fingerprint_state_dicts(models: dict, config_hash: str) -> str:
    """Stable identity of a set of named parameter tensors plus config."""
    digest = hashlib.sha256()
    digest.update(config_hash.encode())
    for model_name in sorted(models):
        state = models[model_name]
        for key in sorted(state):
            tensor = state[key]
            digest.update(model_name.encode())
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Atomically write a checkpoint dict (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError("payload missing the current format_version")
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise CheckpointError(
            f"expected a {expect_kind} checkpoint, found {payload.get('kind')!r} in {path}")
    return payload
