"""SGD training with checkpoint snapshots, recognition tracking, PGD
adversarial training and confusion-matrix evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import engine
from .budget import PerturbationBudget, project
from .data import LabeledDataset
from .engine import ArchitectureSpec, ModelCheckpoint
from .errors import NumericalError

_EVAL_CHUNK = 1024


@dataclass(frozen=True)
class TrainConfig:
    """SGD schedule. Decay points are fractions of ``epochs``; the defaults
    sit at the same relative positions as epochs 75 and 90 of 120."""

    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.05
    decay_fractions: tuple[float, ...] = (0.625, 0.75)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    snapshot_period: int = 5
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decay_fractions", tuple(float(f) for f in self.decay_fractions))
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if any(not 0 < f < 1 for f in self.decay_fractions):
            problems.append("decay fractions must lie strictly between 0 and 1")
        if self.snapshot_period < 1:
            problems.append("snapshot_period must be >= 1")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    def decay_epochs(self) -> list[int]:
        return [int(round(f * self.epochs)) for f in self.decay_fractions]

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        passed = sum(1 for d in self.decay_epochs() if epoch >= d)
        return self.lr * self.decay_factor ** passed

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def sgd_step(params, velocity, grad, lr, momentum, weight_decay):
    """One heavy-ball SGD update with L2 weight decay; returns (params, velocity).

    ``d = grad + wd * p``, ``v = mu * v + d``, ``p = p - lr * v``.
    """
    d = grad + weight_decay * params
    velocity = momentum * velocity + d
    return params - lr * velocity, velocity


@dataclass(frozen=True)
class CheckpointSet:
    checkpoints: tuple[ModelCheckpoint, ...]
    config_digest: str = ""

    def __post_init__(self):
        cks = tuple(self.checkpoints)
        object.__setattr__(self, "checkpoints", cks)
        if not cks:
            return
        epochs = [c.epoch for c in cks]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"checkpoint epochs must be strictly increasing, got {epochs}")
        engine.checkpoints_like(cks)

    def __len__(self):
        return len(self.checkpoints)

    def __iter__(self):
        return iter(self.checkpoints)

    def __getitem__(self, i):
        return self.checkpoints[i]

    @property
    def epochs(self) -> list[int]:
        return [c.epoch for c in self.checkpoints]

    @property
    def final(self) -> ModelCheckpoint:
        return self.checkpoints[-1]

    def save(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for ck in self.checkpoints:
            path = directory / f"ck_epoch{ck.epoch}.sepc"
            engine.save_checkpoint(ck, path)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory, arch: ArchitectureSpec, config_digest="") -> "CheckpointSet":
        paths = sorted(Path(directory).glob("ck_epoch*.sepc"),
                       key=lambda p: int(p.stem[len("ck_epoch"):]))
        return cls(tuple(engine.load_checkpoint(p, arch) for p in paths), config_digest)


def select_checkpoints(cks: CheckpointSet, n: int) -> CheckpointSet:
    """The ``n`` equidistant snapshots at epochs ``N/n, 2N/n, ..., N``."""
    if not len(cks):
        raise ValueError("checkpoint set is empty")
    total = cks.final.epoch
    if n < 1 or n > len(cks) or total % n:
        raise ValueError(f"cannot pick {n} equidistant checkpoints from {len(cks)} snapshots ending at epoch {total}")
    by_epoch = {c.epoch: c for c in cks}
    wanted = [total // n * (i + 1) for i in range(n)]
    missing = [e for e in wanted if e not in by_epoch]
    if missing:
        raise ValueError(f"snapshot grid {cks.epochs} lacks epochs {missing} needed for n={n}")
    return CheckpointSet(tuple(by_epoch[e] for e in wanted), cks.config_digest)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    undefined_rows: list[int] = field(default_factory=list)


def predict_dataset(model, images) -> np.ndarray:
    if isinstance(model, ModelCheckpoint):
        return np.concatenate([engine.predict(model, images[i:i + _EVAL_CHUNK])
                               for i in range(0, len(images), _EVAL_CHUNK)])
    return np.asarray(model(images), dtype=np.int64)


def confusion_matrix(labels, predictions, class_count) -> tuple[np.ndarray, list[int]]:
    """Row-normalised confusion matrix (rows: true class, columns: prediction).

    Rows of classes absent from ``labels`` are NaN and listed as undefined.
    """
    counts = np.zeros((class_count, class_count))
    np.add.at(counts, (np.asarray(labels), np.asarray(predictions)), 1.0)
    totals = counts.sum(axis=1)
    undefined = [int(c) for c in np.flatnonzero(totals == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = counts / totals[:, None]
    conf[undefined] = np.nan
    return conf, undefined


def evaluate(model, dataset: LabeledDataset) -> EvalResult:
    """Accuracy and per-class-normalised confusion of ``model`` on ``dataset``.

    ``model`` is a checkpoint or any callable mapping images to predicted labels.
    """
    if isinstance(model, ModelCheckpoint) and model.arch.num_classes != dataset.class_count:
        raise ValueError(f"model has {model.arch.num_classes} classes, dataset {dataset.class_count}")
    preds = predict_dataset(model, dataset.images)
    conf, undefined = confusion_matrix(dataset.labels, preds, dataset.class_count)
    return EvalResult(float(np.mean(preds == dataset.labels)), conf, undefined)


@dataclass
class TrainReport:
    """Per-epoch metrics of one run. ``recognition[e, i]`` is whether tracked
    sample ``i`` was classified correctly at the end of epoch ``e + 1``."""

    train_acc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    recognition: np.ndarray | None = None
    confusion: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.train_acc)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "train_acc", "test_acc"])
            for e in range(self.epochs):
                test = self.test_acc[e] if self.test_acc else ""
                w.writerow([e + 1, repr(self.lr[e]), repr(self.train_loss[e]), repr(self.train_acc[e]),
                            repr(test) if test != "" else ""])

    def summary(self) -> dict:
        return {
            "epochs": self.epochs,
            "final_train_acc": self.train_acc[-1] if self.train_acc else None,
            "final_test_acc": self.test_acc[-1] if self.test_acc else None,
            "confusion": None if self.confusion is None else np.where(
                np.isnan(self.confusion), None, self.confusion).tolist(),
            "config": self.config,
        }


BatchHook = Callable[[ModelCheckpoint, np.ndarray, np.ndarray, int, int], np.ndarray]


def _augment(x, rng):
    """Random horizontal flips."""
    flip = rng.random(x.shape[0]) < 0.5
    out = x.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def _train_loop(arch, dataset, config, tracked, test, batch_hook: BatchHook | None, init):
    if dataset.input_shape != arch.input_shape:
        raise ValueError(f"dataset input shape {dataset.input_shape} does not match {arch.input_shape}")
    if dataset.class_count != arch.num_classes:
        raise ValueError("dataset class count does not match the architecture")
    if tracked is not None and tracked.input_shape != arch.input_shape:
        raise ValueError("tracked set does not share the training input shape")

    params = (init if init is not None else engine.init_params(arch, config.seed)).params.copy()
    velocity = np.zeros_like(params)
    images = dataset.images.astype(np.float64)
    labels = dataset.labels
    n = len(dataset)
    report = TrainReport(config=asdict(config))
    rows = []
    snapshots = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = np.random.default_rng([config.seed, epoch, 1]).permutation(n)
        aug_rng = np.random.default_rng([config.seed, epoch, 2])
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = images[idx], labels[idx]
            if config.augment:
                xb = _augment(xb, aug_rng)
            model = ModelCheckpoint(arch, params, epoch)
            if batch_hook is not None:
                xb = batch_hook(model, xb, yb, epoch, b)
            try:
                grad, loss = engine.param_gradient(model, xb, yb, return_loss=True)
            except NumericalError as exc:
                raise NumericalError(f"training diverged in epoch {epoch + 1}: {exc}", layer=exc.layer,
                                     epoch=epoch + 1) from exc
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged in epoch {epoch + 1}: loss {loss}", epoch=epoch + 1)
            losses.append(loss * len(idx))
            params, velocity = sgd_step(params, velocity, grad, lr, config.momentum, config.weight_decay)
        if not np.all(np.isfinite(params)):
            raise NumericalError(f"training diverged in epoch {epoch + 1}: non-finite parameters",
                                 epoch=epoch + 1)
        # metrics use the float32-rounded snapshot so a reloaded checkpoint reproduces them
        snap = ModelCheckpoint(arch, params, epoch + 1).rounded()
        train_pred = predict_dataset(snap, dataset.images)
        report.train_acc.append(float(np.mean(train_pred == labels)))
        report.train_loss.append(float(np.sum(losses) / n))
        report.lr.append(lr)
        if test is not None:
            report.test_acc.append(evaluate(snap, test).accuracy)
        if tracked is not None:
            if tracked is dataset:
                rows.append(train_pred == labels)
            else:
                rows.append(predict_dataset(snap, tracked.images) == tracked.labels)
        if (epoch + 1) % config.snapshot_period == 0:
            snapshots.append(snap)
    final = ModelCheckpoint(arch, params, config.epochs).rounded()
    if tracked is not None:
        report.recognition = np.array(rows, dtype=bool)
    report.confusion = evaluate(final, test if test is not None else dataset).confusion
    return CheckpointSet(tuple(snapshots), config.digest()), report, final


def train(arch: ArchitectureSpec, dataset: LabeledDataset, config: TrainConfig,
          tracked: LabeledDataset | None = None, test: LabeledDataset | None = None,
          init: ModelCheckpoint | None = None):
    """Train from ``init`` (default: He init from ``config.seed``).

    Returns ``(CheckpointSet, TrainReport)``; snapshots are taken every
    ``snapshot_period`` epochs and stored float32-rounded.
    """
    cks, report, _ = _train_loop(arch, dataset, config, tracked, test, None, init)
    return cks, report


def pgd_attack(model, x0, labels, budget: PerturbationBudget, steps=10, step_size=None,
               rng=None, observer=None) -> np.ndarray:
    """Untargeted PGD ascent on CE under a linf or l2 budget."""
    (norm,) = budget.norms
    eps = budget.eps_linf if norm == "linf" else budget.eps_l2
    alpha = eps / 4 if step_size is None else step_size
    x = x0
    if rng is not None:
        if norm == "linf":
            x = project(x0 + rng.uniform(-eps, eps, size=x0.shape), x0, budget)
        else:
            d = rng.normal(size=x0.shape)
            flat = d.reshape(d.shape[0], -1)
            r = eps * rng.random(d.shape[0])
            nrm = np.linalg.norm(flat, axis=1)
            nrm[nrm == 0] = 1.0
            x = project(x0 + (flat * (r / nrm)[:, None]).reshape(d.shape), x0, budget)
    for _ in range(steps):
        g = engine.input_gradient_ce(model, x, labels)
        x = project(x + alpha * np.sign(g), x0, budget)
        if observer is not None:
            observer(x, x0)
    return x


def adversarial_train(arch: ArchitectureSpec, dataset: LabeledDataset, config: TrainConfig,
                      at_budget: PerturbationBudget, steps=10, step_size=None, random_start=True,
                      warmup_epochs=0, tracked=None, test=None, observer=None):
    """PGD adversarial training: each minibatch is replaced by untargeted PGD
    examples against the current parameters before the SGD step.

    ``warmup_epochs`` ramps the bound linearly from ``1/warmup_epochs`` of its
    value up to the full bound; a small net from random init otherwise tends
    to get stuck predicting a constant under large bounds. ``step_size``
    (default bound/4) scales with the ramp.

    Returns ``(final ModelCheckpoint, TrainReport)``.
    """
    if at_budget.norms not in ({"linf"}, {"l2"}):
        raise ValueError("adversarial training supports a single linf or l2 bound")
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")

    def budget_at(epoch):
        if not warmup_epochs or epoch + 1 >= warmup_epochs:
            return at_budget, step_size
        f = (epoch + 1) / warmup_epochs
        scaled = replace(at_budget, eps_linf=at_budget.eps_linf * f, eps_l2=at_budget.eps_l2 * f)
        return scaled, None if step_size is None else step_size * f

    def hook(model, xb, yb, epoch, b):
        rng = np.random.default_rng([config.seed, epoch, b, 3]) if random_start else None
        budget, alpha = budget_at(epoch)
        return pgd_attack(model, xb, yb, budget, steps, alpha, rng, observer)

    _, report, final = _train_loop(arch, dataset, config, tracked, test, hook, None)
    return final, report
