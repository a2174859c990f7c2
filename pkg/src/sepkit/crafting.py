"""Crafting protective perturbations from a self-ensemble of checkpoints.

Methods:

``sep``
    Targeted signed-gradient descent on the CE loss toward a permuted label,
    using the sum of the checkpoints' input gradients.
``sep-fa``
    The same loop driven by the feature-alignment loss: the MSE between a
    sample's penultimate features and the clean mean feature of its target
    class, under each checkpoint.
``sep-fa-vr``
    ``sep-fa`` with an SVRG-style inner loop: ``M`` virtual updates, each
    correcting one randomly chosen checkpoint's gradient with the cached
    ensemble mean, decide the sign used for the real step.
``single-model``
    Targeted PGD with one (the final) checkpoint.
``random``
    Clipped Gaussian noise.

Every sample is processed independently; any randomness comes from a stream
keyed on ``(seed, sample id)``.
"""

from __future__ import annotations

import csv
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine
from .budget import PerturbationBudget, is_feasible, norm_stats, perturbation_norms, project
from .data import LabeledDataset, PoisonManifest
from .engine import ModelCheckpoint

__all__ = [
    "TargetPermutation", "ClassCenters", "CraftState", "PerturbationBudget", "project",
    "target_class", "class_centers", "ensemble_gradient", "apply_l0", "compose_mixed",
    "craft_sep", "craft_sep_fa_vr", "craft_single_model", "craft_random", "craft", "METHODS",
    "CraftLog", "ensemble_loss", "vr_picks", "check_iterate",
]

METHODS = ("sep", "sep-fa", "sep-fa-vr", "random", "single-model")


@dataclass(frozen=True)
class TargetPermutation:
    """Label shift ``g(y) = (y + offset) mod classes``."""

    classes: int
    offset: int

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.offset % self.classes == 0:
            raise ValueError(f"offset {self.offset} is 0 mod {self.classes}: g would map classes to themselves")

    def __call__(self, y):
        return (np.asarray(y) + self.offset) % self.classes


def target_class(y, perm: TargetPermutation):
    if np.any(np.asarray(y) < 0) or np.any(np.asarray(y) >= perm.classes):
        raise ValueError(f"label out of range [0, {perm.classes})")
    out = perm(y)
    return int(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class ClassCenters:
    """``centers[k, c]`` is the mean clean feature of class ``c`` under checkpoint ``k``."""

    centers: np.ndarray
    epochs: tuple[int, ...]

    @property
    def n_models(self) -> int:
        return self.centers.shape[0]

    @property
    def classes(self) -> int:
        return self.centers.shape[1]


def class_centers(checkpoints: Sequence[ModelCheckpoint], dataset: LabeledDataset) -> ClassCenters:
    counts = dataset.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no samples; its feature center is undefined")
    out = []
    for ck in checkpoints:
        feats = engine.features(ck, dataset.images)
        sums = np.zeros((dataset.class_count, feats.shape[1]))
        np.add.at(sums, dataset.labels, feats)
        out.append(sums / counts[:, None])
    return ClassCenters(np.stack(out), tuple(ck.epoch for ck in checkpoints))


def _check_centers(checkpoints, centers):
    if centers is None:
        raise ValueError("loss='fa' needs class centers")
    if centers.n_models != len(checkpoints):
        raise ValueError(f"{centers.n_models} center sets for {len(checkpoints)} checkpoints")


def _model_gradient(ck, k, x, targets, loss, centers):
    if loss == "ce":
        return engine.input_gradient_ce(ck, x, targets)
    return engine.input_gradient_fa(ck, x, centers.centers[k][targets])


def ensemble_gradient(checkpoints: Sequence[ModelCheckpoint], x, target, loss="ce",
                      centers: ClassCenters | None = None) -> np.ndarray:
    """Sum over checkpoints (in order) of the per-checkpoint input gradients.

    ``target`` holds the crafting target class of each sample; with
    ``loss="fa"`` the gradient pulls features toward that class's center.
    """
    if loss not in ("ce", "fa"):
        raise ValueError(f"loss must be 'ce' or 'fa', got {loss!r}")
    if loss == "fa":
        _check_centers(checkpoints, centers)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (xb.shape[0],))
    total = None
    for k, ck in enumerate(checkpoints):
        g = _model_gradient(ck, k, xb, t, loss, centers)
        total = g if total is None else total + g
    return total[0] if single else total


def ensemble_loss(checkpoints, x, target, loss="ce", centers=None) -> np.ndarray:
    """Per-sample crafting loss averaged over checkpoints."""
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(x),))
    total = np.zeros(len(x))
    for k, ck in enumerate(checkpoints):
        if loss == "ce":
            total = total + engine.ce_loss(engine.forward(ck, x), t)
        else:
            total = total + engine.fa_loss(ck, x, centers.centers[k][t])
    return total / len(checkpoints)


class CraftLog:
    """Per outer step means of the crafting loss and perturbation norms.

    Step 0 is the clean start; step ``t`` follows the ``t``-th update.
    Safe to feed from several worker threads.
    """

    def __init__(self):
        self._acc = {}
        self._lock = threading.Lock()

    def record(self, norm, step, x, x0, losses):
        norms = perturbation_norms(x, x0)
        with self._lock:
            acc = self._acc.setdefault((norm, step), np.zeros(5))
            acc += [len(x), np.sum(losses), norms["linf"].sum(), norms["l2"].sum(), norms["l0"].sum()]

    def rows(self) -> list[dict]:
        out = []
        for (norm, step), (count, loss, linf, l2, l0) in sorted(self._acc.items()):
            out.append({"component": norm, "step": step, "mean_loss": loss / count,
                        "mean_linf": linf / count, "mean_l2": l2 / count, "mean_l0": l0 / count})
        return out

    def write_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["component", "step", "mean_loss", "mean_linf", "mean_l2", "mean_l0"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def apply_l0(x, x0, gradient, eps_l0: int) -> np.ndarray:
    """Saturate the ``eps_l0`` spatial pixels with the largest channel-summed
    ``|gradient|``; all other pixels keep their ``x0`` values.

    Each selected channel goes to 0 where the gradient is positive and to 1
    where it is negative (descent direction); a zero-gradient channel goes to
    whichever end is farther from its clean value. Ties are broken by the
    lower spatial index. ``x`` is the point the gradient was taken at and is
    used only for shape checking.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if np.shape(x) != x0.shape or g.shape != x0.shape:
        raise ValueError("x, x0 and gradient must share one shape")
    single = x0.ndim == 3
    x0b, gb = (x0[None], g[None]) if single else (x0, g)
    b, c, h, w = x0b.shape
    k = int(eps_l0)
    if k < 1:
        raise ValueError("eps_l0 must be >= 1")
    if k > h * w:
        raise ValueError(f"eps_l0={k} exceeds the {h * w} pixels of a {h}x{w} image")
    score = np.abs(gb).sum(axis=1).reshape(b, h * w)
    chosen = np.argsort(-score, axis=1, kind="stable")[:, :k]
    mask = np.zeros((b, h * w), dtype=bool)
    np.put_along_axis(mask, chosen, True, axis=1)
    mask = np.broadcast_to(mask.reshape(b, 1, h, w), x0b.shape)
    far = np.where(x0b <= 0.5, 1.0, 0.0)
    target = np.where(gb > 0, 0.0, np.where(gb < 0, 1.0, far))
    out = np.where(mask, target, x0b)
    return out[0] if single else out


def compose_mixed(dataset: LabeledDataset, parts: Sequence[np.ndarray]) -> LabeledDataset:
    """Add perturbation tensors to the clean images and clamp to [0, 1]."""
    if not parts:
        raise ValueError("need at least one perturbation")
    clean = dataset.images.astype(np.float64)
    total = np.zeros_like(clean)
    for p in parts:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != clean.shape:
            raise ValueError(f"perturbation shape {p.shape} does not match images {clean.shape}")
        total = total + p
    return dataset.with_images(np.clip(clean + total, 0.0, 1.0))


# ---------------------------------------------------------------------------
# crafting loops


@dataclass
class CraftState:
    """Working state of the variance-reduced loop for a batch of samples.

    Passed to the ``trace`` callback of :func:`craft_sep_fa_vr` after every
    inner step (``m >= 0``) and once after each outer update (``m = None``).
    """

    t: int
    m: int | None
    x0: np.ndarray
    x: np.ndarray
    g_models: list
    g_ens: np.ndarray
    g_upd: np.ndarray
    x_hat: np.ndarray
    picks: np.ndarray | None = None


def _signed_step(x, x0, g, budget, norm):
    if norm == "l0":
        return apply_l0(x, x0, g, budget.eps_l0)
    alpha = budget.step_linf if norm == "linf" else budget.step_l2
    return project(x - alpha * np.sign(g), x0, budget, norm)


def _pgd_component(x0, grad_fn, budget, norm, observer=None, step_cb=None):
    x = x0
    if step_cb is not None:
        step_cb(0, x)
    for t in range(budget.steps):
        x = _signed_step(x, x0, grad_fn(x), budget, norm)
        if observer is not None:
            observer(t, norm, x, x0)
        if step_cb is not None:
            step_cb(t + 1, x)
    return x


def _vr_component(x0, targets, picks, checkpoints, centers, budget, norm, trace=None, observer=None,
                  step_cb=None):
    """Variance-reduced feature-alignment loop on one batch.

    ``picks[i, t, m]`` is the checkpoint sample ``i`` uses at inner step ``m``
    of outer step ``t``.
    """
    n = len(checkpoints)
    x = x0
    if step_cb is not None:
        step_cb(0, x)
    for t in range(budget.steps):
        g_models = [_model_gradient(ck, k, x, targets, "fa", centers) for k, ck in enumerate(checkpoints)]
        g_sum = g_models[0]
        for g in g_models[1:]:
            g_sum = g_sum + g
        g_ens = g_sum / n
        g_upd = np.zeros_like(x)
        x_hat = x
        stacked = np.stack(g_models)
        rows = np.arange(x.shape[0])
        for m in range(budget.inner_steps):
            ks = picks[:, t, m]
            g_pick = np.empty_like(x)
            for k in np.unique(ks):
                sel = np.flatnonzero(ks == k)
                g_pick[sel] = _model_gradient(checkpoints[k], k, x_hat[sel], targets[sel], "fa", centers)
            # (G - g_k) + g_ens: same value as G - (g_k - g_ens), but exactly
            # g_ens whenever G == g_k, as it is at m = 0
            g_upd = g_upd + ((g_pick - stacked[ks, rows]) + g_ens)
            x_hat = _signed_step(x_hat, x0, g_upd, budget, norm)
            if trace is not None:
                trace(CraftState(t, m, x0, x, g_models, g_ens, g_upd, x_hat, ks))
            if observer is not None:
                observer(t, norm, x_hat, x0)
        x = _signed_step(x, x0, g_upd, budget, norm)
        if trace is not None:
            trace(CraftState(t, None, x0, x, g_models, g_ens, g_upd, x_hat))
        if observer is not None:
            observer(t, norm, x, x0)
        if step_cb is not None:
            step_cb(t + 1, x)
    return x


def _chunks(n, size):
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def _run_parallel(fn, selected, chunk, threads):
    parts = _chunks(len(selected), chunk)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda p: fn(selected[p]), parts))
    else:
        results = [fn(selected[p]) for p in parts]
    return results, parts


def _protected(dataset, class_mask):
    if class_mask is None:
        return np.arange(len(dataset))
    mask = np.asarray(sorted(set(int(c) for c in class_mask)))
    if mask.size and (mask.min() < 0 or mask.max() >= dataset.class_count):
        raise ValueError("class mask names a class outside the dataset")
    return np.flatnonzero(np.isin(dataset.labels, mask))


def _manifest(method, dataset, out_images, budget, epochs, perm, seed, extra):
    stats = norm_stats(out_images, dataset.images)
    return PoisonManifest(
        method=method,
        source_digest=dataset.digest(),
        budget=budget.to_dict() if budget is not None else {},
        checkpoint_epochs=list(epochs),
        permutation_offset=None if perm is None else perm.offset,
        seed=int(seed),
        norm_stats=stats,
        extra=extra,
    )


def _drive(dataset, budget, component_fn, class_mask, chunk, threads):
    """Run ``component_fn(rows, norm)`` per norm component over the protected
    samples; a mixed budget's components are crafted from the clean images
    independently and their perturbations added."""
    selected = _protected(dataset, class_mask)
    clean = dataset.images.astype(np.float64)
    iterates = []
    for norm in sorted(budget.norms):
        x = clean.copy()
        if selected.size and budget.steps > 0:
            results, parts = _run_parallel(lambda idx: component_fn(idx, norm), selected, chunk, threads)
            for idx, res in zip(parts, results):
                x[selected[idx]] = res
        iterates.append(x)
    if len(iterates) == 1:
        return dataset.with_images(iterates[0])
    return compose_mixed(dataset, [x - clean for x in iterates])


def _step_logger(log, x0, loss_of, norm):
    if log is None:
        return None
    return lambda step, x: log.record(norm, step, x, x0, loss_of(x))


def _extra(budget, loss, class_mask):
    extra = {"loss": loss, "fa_mse": "mean over feature dimensions"}
    if class_mask is not None:
        extra["class_mask"] = sorted(int(c) for c in class_mask)
    if budget.is_mixed:
        extra["components"] = [budget.single(n).to_dict() for n in sorted(budget.norms)]
    return extra


def craft_sep(dataset: LabeledDataset, checkpoints: Sequence[ModelCheckpoint], budget: PerturbationBudget,
              perm: TargetPermutation, loss="ce", centers: ClassCenters | None = None, seed=0,
              class_mask=None, chunk=512, threads=1, observer=None, log: CraftLog | None = None):
    """Self-ensemble crafting (``loss="ce"``: sep, ``loss="fa"``: sep-fa).

    ``budget.inner_steps`` is ignored. Returns ``(poisoned dataset, manifest)``.
    ``observer(t, norm, x, x0)`` sees every iterate.
    """
    if loss not in ("ce", "fa"):
        raise ValueError(f"loss must be 'ce' or 'fa', got {loss!r}")
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if loss == "fa":
        if centers is None:
            centers = class_centers(checkpoints, dataset)
        _check_centers(checkpoints, centers)
    images = dataset.images.astype(np.float64)
    targets_all = perm(dataset.labels)

    def component(rows, norm):
        t = targets_all[rows]
        x0 = images[rows]
        cb = _step_logger(log, x0, lambda x: ensemble_loss(checkpoints, x, t, loss, centers), norm)
        return _pgd_component(x0, lambda x: ensemble_gradient(checkpoints, x, t, loss, centers),
                              budget, norm, observer, cb)

    out = _drive(dataset, budget, component, class_mask, chunk, threads)
    method = "sep" if loss == "ce" else "sep-fa"
    manifest = _manifest(method, dataset, out.images, budget, [c.epoch for c in checkpoints], perm, seed,
                         _extra(budget, loss, class_mask))
    return out, manifest


def vr_picks(seed, sample_ids, n_models, steps, inner_steps) -> np.ndarray:
    """Per-sample checkpoint choices ``[samples, steps, inner_steps]``."""
    out = np.empty((len(sample_ids), steps, inner_steps), dtype=np.int64)
    for i, sid in enumerate(sample_ids):
        out[i] = np.random.default_rng([int(seed), int(sid)]).integers(0, n_models, size=(steps, inner_steps))
    return out


def craft_sep_fa_vr(dataset: LabeledDataset, checkpoints: Sequence[ModelCheckpoint], budget: PerturbationBudget,
                    perm: TargetPermutation, centers: ClassCenters | None = None, seed=0, class_mask=None,
                    sample_ids=None, chunk=512, threads=1, trace: Callable | None = None, observer=None,
                    log: CraftLog | None = None):
    """Feature-aligned self-ensemble crafting with variance-reduced inner updates.

    Returns the final iterate after ``budget.steps`` outer updates.
    ``sample_ids`` key the per-sample random streams (default: positions).
    """
    if budget.inner_steps < 1:
        raise ValueError("sep-fa-vr needs inner_steps >= 1; craft_sep(loss='fa') is the variant "
                         "without inner updates")
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if centers is None:
        centers = class_centers(checkpoints, dataset)
    _check_centers(checkpoints, centers)
    images = dataset.images.astype(np.float64)
    targets_all = perm(dataset.labels)
    ids = np.arange(len(dataset)) if sample_ids is None else np.asarray(sample_ids)
    if ids.shape != (len(dataset),):
        raise ValueError("sample_ids must give one id per sample")

    def component(rows, norm):
        t = targets_all[rows]
        x0 = images[rows]
        picks = vr_picks(seed, ids[rows], len(checkpoints), budget.steps, budget.inner_steps)
        cb = _step_logger(log, x0, lambda x: ensemble_loss(checkpoints, x, t, "fa", centers), norm)
        return _vr_component(x0, t, picks, checkpoints, centers, budget, norm, trace, observer, cb)

    out = _drive(dataset, budget, component, class_mask, chunk, threads)
    manifest = _manifest("sep-fa-vr", dataset, out.images, budget, [c.epoch for c in checkpoints], perm, seed,
                         _extra(budget, "fa", class_mask))
    return out, manifest


def craft_single_model(dataset: LabeledDataset, model: ModelCheckpoint, budget: PerturbationBudget,
                       perm: TargetPermutation, seed=0, class_mask=None, chunk=512, threads=1, observer=None,
                       log: CraftLog | None = None):
    """Targeted CE PGD against one model (the AdvPoison-style baseline)."""
    images = dataset.images.astype(np.float64)
    targets_all = perm(dataset.labels)

    def component(rows, norm):
        t = targets_all[rows]
        x0 = images[rows]
        cb = _step_logger(log, x0, lambda x: engine.ce_loss(engine.forward(model, x), t), norm)
        return _pgd_component(x0, lambda x: engine.input_gradient_ce(model, x, t), budget, norm, observer, cb)

    out = _drive(dataset, budget, component, class_mask, chunk, threads)
    manifest = _manifest("single-model", dataset, out.images, budget, [model.epoch], perm, seed,
                         _extra(budget, "ce", class_mask))
    return out, manifest


def craft_random(dataset: LabeledDataset, eps: float, seed=0, class_mask=None):
    """Gaussian noise with variance ``eps`` (standard deviation ``sqrt(eps)``),
    clipped to ``[-eps, eps]`` and to [0, 1]. Returns ``(dataset, manifest)``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    images = dataset.images.astype(np.float64)
    out = images.copy()
    for i in _protected(dataset, class_mask):
        noise = np.random.default_rng([int(seed), int(i), 7]).normal(0.0, np.sqrt(eps), size=images.shape[1:])
        out[i] = np.clip(images[i] + np.clip(noise, -eps, eps), 0.0, 1.0)
    result = dataset.with_images(out)
    budget = PerturbationBudget(norms={"linf"}, eps_linf=eps, steps=0, n_models=1, inner_steps=0)
    extra = {"noise": "gaussian, variance eps, clipped to eps"}
    if class_mask is not None:
        extra["class_mask"] = sorted(int(c) for c in class_mask)
    return result, _manifest("random", dataset, result.images, budget, [], None, seed, extra)


def craft(method: str, dataset: LabeledDataset, checkpoints: Sequence[ModelCheckpoint],
          budget: PerturbationBudget, perm: TargetPermutation, seed=0, class_mask=None, **kwargs):
    """Dispatch by method name; ``checkpoints`` are the self-ensemble members."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    checkpoints = list(checkpoints)
    if method == "random":
        return craft_random(dataset, budget.eps_linf, seed, class_mask)
    if method == "single-model":
        kwargs.pop("centers", None)
        kwargs.pop("sample_ids", None)
        kwargs.pop("trace", None)
        return craft_single_model(dataset, checkpoints[-1], budget, perm, seed, class_mask, **kwargs)
    if method == "sep-fa-vr":
        return craft_sep_fa_vr(dataset, checkpoints, budget, perm, seed=seed, class_mask=class_mask, **kwargs)
    kwargs.pop("sample_ids", None)
    kwargs.pop("trace", None)
    return craft_sep(dataset, checkpoints, budget, perm, loss="ce" if method == "sep" else "fa", seed=seed,
                     class_mask=class_mask, **kwargs)


def check_iterate(budget, norm, x, x0):
    """Observer-friendly feasibility assertion."""
    if norm == "l0":
        changed = np.count_nonzero(np.abs(np.asarray(x) - x0).max(axis=1).reshape(len(x), -1), axis=1)
        assert np.all(changed <= budget.eps_l0) and np.all((x >= 0) & (x <= 1))
    else:
        assert is_feasible(x, x0, budget, norm)
