"""Perturbation budgets and the norm measurements used to enforce them."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import BudgetViolationError

NORMS = ("linf", "l2", "l0")
ALLOWED_NORM_SETS = (
    frozenset({"linf"}),
    frozenset({"l2"}),
    frozenset({"l0"}),
    frozenset({"linf", "l2"}),
    frozenset({"linf", "l0"}),
)

# Slack for float32 storage of float64 iterates.
STORAGE_TOL = 1e-6
L2_RTOL = 1e-12


@dataclass(frozen=True)
class PerturbationBudget:
    """Norm bounds and optimisation schedule for crafting.

    ``eps_linf`` is in pixel units ([0, 1] scale), ``eps_l2`` in the same units
    over the whole image, ``eps_l0`` a count of spatial pixels. Unset step
    sizes default to ``eps_linf / 10`` and ``eps_l2 / 5``.
    """

    norms: frozenset = field(default_factory=lambda: frozenset({"linf"}))
    eps_linf: float = 8 / 255
    eps_l2: float = 0.0
    eps_l0: int = 0
    alpha_linf: float | None = None
    alpha_l2: float | None = None
    steps: int = 30
    n_models: int = 15
    inner_steps: int = 15

    def __post_init__(self):
        norms = frozenset(self.norms)
        object.__setattr__(self, "norms", norms)
        problems = []
        if norms not in ALLOWED_NORM_SETS:
            problems.append(f"norm set {sorted(norms)} not one of linf, l2, l0, linf+l2, linf+l0")
        for name in ("eps_linf", "eps_l2", "eps_l0"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if "l0" in norms and self.eps_l0 < 1:
            problems.append("an l0 budget needs eps_l0 >= 1")
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.n_models < 1:
            problems.append("n_models must be >= 1")
        if self.inner_steps < 0:
            problems.append("inner_steps must be >= 0")
        for name in ("alpha_linf", "alpha_l2"):
            value = getattr(self, name)
            if value is not None and value < 0:
                problems.append(f"{name} must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def step_linf(self) -> float:
        return self.eps_linf / 10 if self.alpha_linf is None else self.alpha_linf

    @property
    def step_l2(self) -> float:
        return self.eps_l2 / 5 if self.alpha_l2 is None else self.alpha_l2

    def single(self, norm: str) -> "PerturbationBudget":
        """The same budget restricted to one norm (a component of a mix)."""
        return replace(self, norms=frozenset({norm}))

    @property
    def is_mixed(self) -> bool:
        return len(self.norms) > 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norms"] = sorted(self.norms)
        d["step_linf"] = self.step_linf
        d["step_l2"] = self.step_l2
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationBudget":
        keys = {"norms", "eps_linf", "eps_l2", "eps_l0", "alpha_linf", "alpha_l2",
                "steps", "n_models", "inner_steps"}
        return cls(**{k: (frozenset(v) if k == "norms" else v) for k, v in d.items() if k in keys})


def perturbation_norms(perturbed, clean) -> dict[str, np.ndarray]:
    """Per-sample linf, l2 and l0 (changed spatial pixels) of ``perturbed - clean``."""
    delta = np.asarray(perturbed, dtype=np.float64) - np.asarray(clean, dtype=np.float64)
    flat = delta.reshape(delta.shape[0], -1)
    pixel_max = np.abs(delta).max(axis=1).reshape(delta.shape[0], -1)
    return {
        "linf": np.abs(flat).max(axis=1),
        "l2": np.sqrt(np.sum(flat * flat, axis=1)),
        "l0": np.count_nonzero(pixel_max, axis=1),
        "_pixel_max": pixel_max,
    }


def norm_stats(perturbed, clean) -> dict[str, float]:
    """Max and mean of each per-sample norm, as plain floats for a manifest."""
    norms = perturbation_norms(perturbed, clean)
    out = {}
    for name in NORMS:
        v = norms[name].astype(np.float64)
        out[f"{name}_max"] = float(v.max())
        out[f"{name}_mean"] = float(v.mean())
    return out


def budget_violations(perturbed, clean, budget: PerturbationBudget, tol=STORAGE_TOL) -> list[str]:
    """Human-readable list of samples exceeding ``budget`` (empty if feasible).

    Mixed budgets are checked through what any sum of their components must
    satisfy: a linf+l0 mix may exceed the linf bound on at most ``eps_l0``
    pixels; a linf+l2 mix is bounded by the triangle inequality.
    """
    norms = perturbation_norms(perturbed, clean)
    n_coords = int(np.prod(np.shape(clean)[1:]))
    bad = []

    def check(values, bound, label):
        over = np.flatnonzero(values > bound + tol)
        if over.size:
            i = int(over[0])
            bad.append(f"{over.size} sample(s) exceed {label} <= {bound:.6g} (sample {i}: {float(values[i]):.6g})")

    ns = budget.norms
    if ns == {"linf"}:
        check(norms["linf"], budget.eps_linf, "linf")
    elif ns == {"l2"}:
        check(norms["l2"], budget.eps_l2, "l2")
    elif ns == {"l0"}:
        check(norms["l0"], budget.eps_l0, "l0")
    elif ns == {"linf", "l2"}:
        check(norms["linf"], budget.eps_linf + budget.eps_l2, "linf (linf+l2 mix)")
        check(norms["l2"], budget.eps_l2 + budget.eps_linf * np.sqrt(n_coords), "l2 (linf+l2 mix)")
    elif ns == {"linf", "l0"}:
        outside = np.count_nonzero(norms["_pixel_max"] > budget.eps_linf + tol, axis=1)
        check(outside, budget.eps_l0, "pixels beyond linf (linf+l0 mix)")
    return bad


def check_budget(perturbed, clean, budget: PerturbationBudget, tol=STORAGE_TOL) -> None:
    problems = budget_violations(perturbed, clean, budget, tol)
    if problems:
        raise BudgetViolationError("; ".join(problems))


def project(x, x0, budget: PerturbationBudget, norm: str | None = None) -> np.ndarray:
    """Project ``x`` into the ``norm`` ball around ``x0`` and into [0, 1].

    linf clamps each coordinate of ``x - x0`` to ``[-eps, eps]``; l2 rescales
    each sample's ``x - x0`` radially when its 2-norm exceeds ``eps``. Entries
    already inside the ball are returned untouched (not recomputed as
    ``x0 + delta``), which makes the map exactly idempotent. ``l0`` only
    applies the [0, 1] clamp; see :func:`sepkit.crafting.apply_l0`.
    """
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x0.shape}")
    if norm is None:
        if len(budget.norms) != 1:
            raise ValueError("mixed budgets are projected per component; pass norm=")
        (norm,) = budget.norms
    delta = x - x0
    if norm == "linf":
        eps = budget.eps_linf
        out = np.where(np.abs(delta) > eps, x0 + np.clip(delta, -eps, eps), x)
    elif norm == "l2":
        eps = budget.eps_l2
        batched = x.ndim > 1
        flat = delta.reshape(delta.shape[0], -1) if batched else delta[None]
        nrm = np.sqrt(np.sum(flat * flat, axis=1))
        # slack keeps a rescaled sample from being rescaled again: relative for
        # the norm itself, absolute for rounding x0 + delta (half an ulp of
        # values in [0, 1] per coordinate)
        over = nrm > eps * (1 + L2_RTOL) + np.sqrt(flat.shape[1]) * np.finfo(np.float64).eps
        out = x.copy() if batched else x[None].copy()
        if np.any(over):
            x0_flat = (x0.reshape(x0.shape[0], -1) if batched else x0[None])
            rows = np.flatnonzero(over)
            scaled = flat[rows] * (eps / nrm[rows])[:, None]
            out = out.reshape(flat.shape)
            out[rows] = x0_flat[rows] + scaled
        out = out.reshape(x.shape)
    elif norm == "l0":
        out = x
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return np.clip(out, 0.0, 1.0)


def is_feasible(x, x0, budget: PerturbationBudget, norm: str | None = None, tol=1e-12) -> bool:
    """True when batch ``x`` lies in [0, 1] and inside the budget around ``x0``.

    ``norm`` restricts the check to one component of a mixed budget.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0.0 or x.max() > 1.0:
        return False
    b = budget if norm is None else budget.single(norm)
    if b.norms == {"l2"}:
        tol = tol + b.eps_l2 * L2_RTOL
    return not budget_violations(x, x0, b, tol)
