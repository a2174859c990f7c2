"""Diagnostics over trained models: gradient diversity, recognition curves,
validation gaps and targeted confusion shift."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .crafting import TargetPermutation
from .data import LabeledDataset
from .engine import ModelCheckpoint
from .training import TrainReport, evaluate

# Gradients with a 2-norm at or below this are treated as zero.
ZERO_GRAD = 1e-30


@dataclass
class DiversityMatrix:
    """Mean absolute cosine similarity of input gradients for each model pair.

    ``skipped[i, j]`` counts samples left out of entry (i, j) because one of
    the two gradients vanished; ``undefined[i, j]`` is set when every sample
    was skipped, in which case the entry is NaN.
    """

    model_ids: list[str]
    matrix: np.ndarray
    skipped: np.ndarray
    n_samples: int
    undefined: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.undefined is None:
            self.undefined = np.isnan(self.matrix)

    def mean_off_diagonal(self) -> float:
        k = self.matrix.shape[0]
        off = self.matrix[~np.eye(k, dtype=bool)]
        off = off[~np.isnan(off)]
        return float(off.mean()) if off.size else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model"] + self.model_ids)
            for mid, row in zip(self.model_ids, self.matrix):
                w.writerow([mid] + [repr(float(v)) for v in row])

    def to_dict(self) -> dict:
        return {
            "model_ids": self.model_ids,
            "matrix": np.where(np.isnan(self.matrix), None, self.matrix).tolist(),
            "skipped": self.skipped.tolist(),
            "undefined_pairs": [[int(i), int(j)] for i, j in zip(*np.nonzero(self.undefined))],
            "n_samples": self.n_samples,
            "mean_off_diagonal": self.mean_off_diagonal(),
        }

    def write_pgm(self, path, cell=16) -> None:
        """Greyscale heatmap (white = 1) with ``cell``-pixel squares."""
        img = np.nan_to_num(self.matrix, nan=0.0)
        img = np.kron(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), np.ones((cell, cell), np.uint8))
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
            fh.write(img.tobytes())


def gradient_diversity(models: Sequence[ModelCheckpoint], samples, targets,
                       model_ids: Sequence[str] | None = None) -> DiversityMatrix:
    """Pairwise mean |cos| between true-label CE input gradients.

    Args:
        models: at least two checkpoints.
        samples: batch of images ``[B, C, H, W]``.
        targets: class index per sample (usually the true labels).
        model_ids: names for the CSV header; defaults to ``epoch<e>``.
    """
    if len(models) < 2:
        raise ValueError("gradient diversity needs at least two models")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] < 1:
        raise ValueError("samples must be a non-empty batch [B, C, H, W]")
    k = len(models)
    grads, norms = [], []
    for m in models:
        g = engine.input_gradient_ce(m, x, targets).reshape(x.shape[0], -1)
        grads.append(g)
        norms.append(np.sqrt(np.sum(g * g, axis=1)))
    matrix = np.empty((k, k))
    skipped = np.zeros((k, k), dtype=np.int64)
    for i in range(k):
        for j in range(i, k):
            ok = (norms[i] > ZERO_GRAD) & (norms[j] > ZERO_GRAD)
            skipped[i, j] = skipped[j, i] = int(np.count_nonzero(~ok))
            if not ok.any():
                matrix[i, j] = matrix[j, i] = np.nan
                continue
            if i == j:
                matrix[i, i] = 1.0
                continue
            dots = np.sum(grads[i][ok] * grads[j][ok], axis=1)
            cos = np.minimum(np.abs(dots) / (norms[i][ok] * norms[j][ok]), 1.0)
            matrix[i, j] = matrix[j, i] = float(cos.mean())
    ids = list(model_ids) if model_ids is not None else [f"epoch{m.epoch}" for m in models]
    if len(ids) != k:
        raise ValueError("model_ids length does not match models")
    return DiversityMatrix(ids, matrix, skipped, int(x.shape[0]))


def recognition_curve(report: TrainReport) -> np.ndarray:
    """Per-epoch fraction of the tracked set classified correctly."""
    if report.recognition is None:
        raise ValueError("report has no recognition matrix; train with tracked=")
    return np.asarray(report.recognition, dtype=np.float64).mean(axis=1)


@dataclass
class GapCurve:
    epochs: list[int]
    train_acc: list[float]
    heldout_acc: list[float]

    @property
    def gap(self) -> list[float]:
        return [a - b for a, b in zip(self.train_acc, self.heldout_acc)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_acc", "heldout_acc", "gap"])
            for row in zip(self.epochs, self.train_acc, self.heldout_acc, self.gap):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def validation_gap(train_report: TrainReport, heldout: LabeledDataset,
                   checkpoints: Sequence[ModelCheckpoint]) -> GapCurve:
    """Train accuracy versus held-out accuracy at every snapshot.

    ``checkpoints`` are the snapshots of the run that produced
    ``train_report``; the train accuracy of epoch ``e`` is read from the
    report.
    """
    if not checkpoints:
        raise ValueError("validation gap needs at least one snapshot")
    epochs, tr, held = [], [], []
    for ck in checkpoints:
        if not 1 <= ck.epoch <= train_report.epochs:
            raise ValueError(f"snapshot epoch {ck.epoch} outside the report's {train_report.epochs} epochs")
        epochs.append(int(ck.epoch))
        tr.append(float(train_report.train_acc[ck.epoch - 1]))
        held.append(evaluate(ck, heldout).accuracy)
    return GapCurve(epochs, tr, held)


def targeted_shift(confusion, perm: TargetPermutation) -> float:
    """Mean over classes of the confusion mass at (y, g(y)).

    Undefined (NaN) rows are left out of the mean.
    """
    conf = np.asarray(confusion, dtype=np.float64)
    c = conf.shape[0]
    if conf.shape != (c, c) or c != perm.classes:
        raise ValueError(f"confusion matrix shape {conf.shape} does not match {perm.classes} classes")
    ys = np.arange(c)
    vals = conf[ys, perm(ys)]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ValueError("every confusion row is undefined")
    return float(vals.mean())


def write_curve_csv(path, columns: dict[str, Sequence[float]], start_epoch=1) -> None:
    """CSV with an ``epoch`` column followed by one column per named curve."""
    names = list(columns)
    length = {len(v) for v in columns.values()}
    if len(length) != 1:
        raise ValueError("curves differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + names)
        for e in range(length.pop()):
            w.writerow([e + start_epoch] + [repr(float(columns[n][e])) for n in names])


def write_confusion_csv(path, confusion) -> None:
    conf = np.asarray(confusion, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true"] + [f"pred{j}" for j in range(conf.shape[1])])
        for i, row in enumerate(conf):
            w.writerow([i] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
