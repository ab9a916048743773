"""Training loop: one optimizer step per patient, early stopping on validation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import EHRDataset, PatientRecord
from .errors import ConfigurationError
from .metrics import jaccard, predict_dump
from .model import MedRecModel
from .optim import CurriculumContext, OptimizerState, adam_step

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "epoch", "loss", "lr")


@dataclass
class TrainResult:
    loss_trace: list[tuple[int, int, float, float]] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int | None = None
    best_score: float | None = None
    state: OptimizerState | None = None


def patient_loss_and_grads(model: MedRecModel, patient: PatientRecord, ddi: np.ndarray, loss_cfg):
    params = model.state_dict()
    with ad.tracing() as trace:
        loss = model.loss(patient, ddi, loss_cfg)
        grads = trace.backward(loss)
    return loss.item(), {name: grads[p] for name, p in params.items()}


def mean_jaccard(model: MedRecModel, patients: Sequence[PatientRecord]) -> float:
    return fmean(jaccard(p) for p in predict_dump(model, patients))


def mean_loss(model: MedRecModel, patients: Sequence[PatientRecord], ddi: np.ndarray, loss_cfg) -> float:
    return fmean(model.loss(p, ddi, loss_cfg).item() for p in patients)


def training_loop(
    model: MedRecModel,
    dataset: EHRDataset,
    train_ids: Sequence[str],
    cfg: RunConfig,
    val_ids: Sequence[str] = (),
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train ``model`` in place.

    Each epoch visits the training patients in a seeded shuffled order.  The
    iteration counter counts completed optimizer steps and never resets.
    With validation patients and a patience, the parameters with the best
    validation Jaccard are restored at the end.
    """
    train = dataset.subset(train_ids)
    if not train:
        raise ConfigurationError("training split is empty")
    val = dataset.subset(val_ids)
    loss_cfg = cfg.loss_config()
    max_iter = cfg.max_iter if cfg.max_iter is not None else cfg.epochs * len(train)
    state = OptimizerState(
        lr=cfg.lr, max_iter=max_iter, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        moment_mode=cfg.moment_mode, curriculum=not cfg.no_aclm,
    )
    longest = max(len(p) for p in train)
    rng = np.random.default_rng(cfg.seed)
    params = model.state_dict()
    result = TrainResult(state=state)
    out = Path(out_dir) if out_dir is not None else None
    early_stop = bool(val) and cfg.patience is not None
    best_params = None
    stale = 0
    meta = {"config": cfg.to_json()}

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for k in rng.permutation(len(train)):
            patient = train[k]
            loss, grads = patient_loss_and_grads(model, patient, dataset.ddi, loss_cfg)
            length = len(patient)
            if cfg.curriculum == "shorter-slower":
                length = longest + 1 - length
            lr = adam_step(params, grads, state, CurriculumContext(state.steps, length))
            losses.append(loss)
            result.loss_trace.append((state.steps, epoch, loss, lr))
        row = {"epoch": epoch, "train_loss": fmean(losses)}
        if val:
            row["val_jaccard"] = mean_jaccard(model, val)
        result.history.append(row)
        result.epochs_run = epoch
        log.info("epoch %d %s", epoch, json.dumps(row))

        if out is not None:
            save_checkpoint(out / "last.npz", model, state, {**meta, "epoch": epoch})
        if early_stop:
            score = row["val_jaccard"]
            if result.best_score is None or score > result.best_score:
                result.best_score, result.best_epoch, stale = score, epoch, 0
                best_params = {k: p.data.copy() for k, p in params.items()}
                if out is not None:
                    save_checkpoint(out / "checkpoint.npz", model, state,
                                    {**meta, "epoch": epoch, "val_jaccard": score})
            else:
                stale += 1
                if stale > cfg.patience:
                    log.info("early stop after epoch %d (best %d)", epoch, result.best_epoch)
                    break

    if early_stop and best_params is not None:
        model.load_state_dict(best_params)
    elif out is not None:
        save_checkpoint(out / "checkpoint.npz", model, state, {**meta, "epoch": result.epochs_run})
    if out is not None:
        write_loss_trace(out / f"loss_trace_{cfg.variant}.csv", result.loss_trace)
    return result


def write_loss_trace(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for step, epoch, loss, lr in rows:
            writer.writerow([step, epoch, repr(loss), repr(lr)])


def read_loss_trace(path) -> list[tuple[int, int, float, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["step"]), int(r["epoch"]), float(r["loss"]), float(r["lr"])) for r in reader]
