"""Checkpoint container: parameters, optimizer moments, metadata.

Stored as a numpy ``.npz`` archive.  Arrays are keyed ``param/<name>``,
``mu/<name>`` and ``eta/<name>``; ``__meta__`` holds a JSON document with the
format version, model config, optimizer scalars and the run config echo.
Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .model import ModelConfig, MedRecModel
from .optim import OptimizerState

FORMAT_VERSION = 1


def save_checkpoint(path, model: MedRecModel, state: OptimizerState | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": p.data for k, p in model.named_parameters()}
    meta = {"format_version": FORMAT_VERSION, "model": model.config.to_json(), "extra": extra or {}}
    if state is not None:
        arrays.update({f"mu/{k}": v for k, v in state.mu.items()})
        arrays.update({f"eta/{k}": v for k, v in state.eta.items()})
        meta["optimizer"] = {
            "lr": state.lr, "max_iter": state.max_iter, "beta1": state.beta1,
            "beta2": state.beta2, "eps": state.eps, "moment_mode": state.moment_mode,
            "curriculum": state.curriculum, "steps": state.steps,
        }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as archive:
        return _meta(archive, path)


def _meta(archive, path) -> dict:
    if "__meta__" not in archive:
        raise ConfigurationError(f"{path}: not a checkpoint (no metadata)")
    meta = json.loads(str(archive["__meta__"]))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return meta


def load_checkpoint(path) -> tuple[MedRecModel, OptimizerState | None, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = _meta(archive, path)
        model = MedRecModel(ModelConfig(**meta["model"]))
        model.load_state_dict({k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")})
        state = None
        if "optimizer" in meta:
            state = OptimizerState(**meta["optimizer"])
            state.mu = {k[len("mu/"):]: archive[k] for k in archive.files if k.startswith("mu/")}
            state.eta = {k[len("eta/"):]: archive[k] for k in archive.files if k.startswith("eta/")}
    return model, state, meta
