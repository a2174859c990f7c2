"""Experiment configuration: a YAML tree validated in one pass.

Every problem found is collected (with the dotted path of the offending key)
before anything is raised, so a user sees the full list at once.

Example::

    seed: 0
    out: runs/desk
    dataset:
      kind: synthetic
      synthetic: {classes: 4, per_class: 100, image_size: 16, family: blobs}
    protector: {arch: cnn-small, train: {epochs: 40, lr: 0.1}}
    appropriator: {arch: mlp-small}
    budget: {norms: [linf], eps_linf: 16/255, steps: 30, n_models: 5, inner_steps: 5}
    permutation_offset: 2
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import yaml

from .budget import PerturbationBudget
from .data import PATTERN_FAMILIES, SyntheticSpec
from .engine import ARCH_IDS
from .errors import ConfigError
from .training import TrainConfig

ENV_OUT = "SEPKIT_OUT"
ENV_THREADS = "SEPKIT_THREADS"

_DATASET_KINDS = ("synthetic", "idx", "cifar-binary")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    # idx: train_images, train_labels, test_images, test_labels
    # cifar-binary: train (list), test (list)
    paths: dict = field(default_factory=dict)
    class_count: int | None = None
    heldout_fraction: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "cnn-small"
    train: TrainConfig = field(default_factory=TrainConfig)
    # appropriator only: independent training runs (seeds seed, seed+1, ...)
    # whose test metrics are averaged by `eval`
    repeats: int = 1


@dataclass(frozen=True)
class AnalysisConfig:
    diversity: bool = True
    diversity_models: int = 5
    diversity_samples: int = 1000
    recognition: bool = True
    validation_gap: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protector: ModelConfig = field(default_factory=ModelConfig)
    appropriator: ModelConfig = field(default_factory=ModelConfig)
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)
    permutation_offset: int = 1
    class_mask: tuple[int, ...] | None = None
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        def conv(v):
            if v is not self and hasattr(v, "to_dict"):
                return v.to_dict()
            if hasattr(v, "__dataclass_fields__"):
                return {f.name: conv(getattr(v, f.name)) for f in fields(v)}
            if isinstance(v, (tuple, list)):
                return [conv(x) for x in v]
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return v
        return conv(self)


class _Problems(list):
    def add(self, path, msg):
        self.append(f"{path}: {msg}")


def _number(value, path, problems, integer=False):
    """Accept ints, floats and ``"a/b"`` fraction strings."""
    if isinstance(value, bool):
        problems.add(path, "expected a number, got a boolean")
        return None
    if isinstance(value, str):
        try:
            value = float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            problems.add(path, f"cannot parse {value!r} as a number")
            return None
    if not isinstance(value, (int, float)):
        problems.add(path, f"expected a number, got {type(value).__name__}")
        return None
    if integer:
        if float(value) != int(value):
            problems.add(path, f"expected an integer, got {value}")
            return None
        return int(value)
    return float(value)


def _section(tree, key, path, problems):
    value = tree.get(key, {}) if isinstance(tree, dict) else {}
    if value is None:
        return {}
    if not isinstance(value, dict):
        problems.add(f"{path}{key}", "expected a mapping")
        return {}
    return value


def _unknown(tree, allowed, path, problems):
    for key in tree:
        if key not in allowed:
            problems.add(f"{path}{key}", f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _typed_fields(tree, cls, path, problems, skip=()):
    """Coerce the keys of ``tree`` to the field types of dataclass ``cls``."""
    out = {}
    types = {f.name: f for f in fields(cls) if f.init and f.name not in skip}
    defaults = cls()
    for key, raw in tree.items():
        if key not in types:
            continue
        default = getattr(defaults, key)
        p = f"{path}{key}"
        if isinstance(default, bool):
            if not isinstance(raw, bool):
                problems.add(p, "expected true or false")
                continue
            out[key] = raw
        elif isinstance(default, int) and not isinstance(default, bool):
            v = _number(raw, p, problems, integer=True)
            if v is not None:
                out[key] = v
        elif isinstance(default, float) or (default is None and key.startswith(("alpha", "eps"))):
            if raw is None:
                out[key] = None
                continue
            v = _number(raw, p, problems)
            if v is not None:
                out[key] = v
        elif isinstance(default, tuple):
            if not isinstance(raw, list):
                problems.add(p, "expected a list")
                continue
            vals = [_number(v, f"{p}[{i}]", problems) for i, v in enumerate(raw)]
            if None not in vals:
                out[key] = tuple(vals)
        elif isinstance(default, str):
            if not isinstance(raw, str):
                problems.add(p, "expected a string")
                continue
            out[key] = raw
        else:
            out[key] = raw
    return out


def _build(cls, kwargs, path, problems, **extra):
    try:
        return cls(**kwargs, **extra)
    except (ValueError, TypeError) as exc:
        for part in str(exc).split("; "):
            problems.add(path.rstrip("."), part)
        return None


def _train_config(tree, path, problems, seed):
    _unknown(tree, {f.name for f in fields(TrainConfig)}, path, problems)
    kw = _typed_fields(tree, TrainConfig, path, problems)
    kw.setdefault("seed", seed)
    return _build(TrainConfig, kw, path, problems)


def _model_config(tree, path, problems, seed, base: ModelConfig | None = None):
    _unknown(tree, {"arch", "train", "repeats"}, path, problems)
    arch = tree.get("arch", base.arch if base else "cnn-small")
    if arch not in ARCH_IDS:
        problems.add(f"{path}arch", f"unknown architecture {arch!r} (expected one of {', '.join(ARCH_IDS)})")
    train_tree = _section(tree, "train", path, problems)
    if base is not None and base.train is not None and "train" not in tree:
        # appropriator defaults to the protector's schedule
        train = base.train
    else:
        train = _train_config(train_tree, f"{path}train.", problems, seed)
    repeats = _number(tree.get("repeats", 1), f"{path}repeats", problems, integer=True)
    if repeats is not None and repeats < 1:
        problems.add(f"{path}repeats", "must be >= 1")
    return ModelConfig(arch, train, repeats if repeats and repeats >= 1 else 1)


def _dataset_config(tree, problems, base_dir: Path):
    path = "dataset."
    _unknown(tree, {"kind", "synthetic", "idx", "cifar-binary", "class_count", "heldout_fraction"}, path, problems)
    kind = tree.get("kind", "synthetic")
    if kind not in _DATASET_KINDS:
        problems.add(f"{path}kind", f"unknown dataset kind {kind!r} (expected one of {', '.join(_DATASET_KINDS)})")
    class_count = tree.get("class_count")
    if class_count is not None:
        class_count = _number(class_count, f"{path}class_count", problems, integer=True)
    frac = _number(tree.get("heldout_fraction", 0.0), f"{path}heldout_fraction", problems)
    if frac is not None and not 0 <= frac < 1:
        problems.add(f"{path}heldout_fraction", "must be in [0, 1)")

    syn_tree = _section(tree, "synthetic", path, problems)
    _unknown(syn_tree, {f.name for f in fields(SyntheticSpec)}, f"{path}synthetic.", problems)
    syn = _build(SyntheticSpec, _typed_fields(syn_tree, SyntheticSpec, f"{path}synthetic.", problems),
                 f"{path}synthetic.", problems) or SyntheticSpec()
    if kind == "synthetic":
        if syn.family not in PATTERN_FAMILIES:
            problems.add(f"{path}synthetic.family", f"unknown family {syn.family!r}")
        if syn.classes < 2:
            problems.add(f"{path}synthetic.classes", "must be >= 2")
        if syn.per_class < 1 or syn.test_per_class < 1:
            problems.add(f"{path}synthetic", "per_class and test_per_class must be >= 1")

    paths = {}
    if kind == "idx":
        sub = _section(tree, "idx", path, problems)
        keys = ("train_images", "train_labels", "test_images", "test_labels")
        _unknown(sub, set(keys), f"{path}idx.", problems)
        for key in keys:
            p = f"{path}idx.{key}"
            if key not in sub:
                problems.add(p, "missing")
                continue
            resolved = (base_dir / str(sub[key])).resolve()
            if not resolved.is_file():
                problems.add(p, f"file not found: {resolved}")
            paths[key] = str(resolved)
    elif kind == "cifar-binary":
        sub = _section(tree, "cifar-binary", path, problems)
        _unknown(sub, {"train", "test"}, f"{path}cifar-binary.", problems)
        for key in ("train", "test"):
            p = f"{path}cifar-binary.{key}"
            entries = sub.get(key)
            if entries is None:
                problems.add(p, "missing")
                continue
            entries = [entries] if isinstance(entries, str) else entries
            if not isinstance(entries, list) or not entries:
                problems.add(p, "expected a path or a non-empty list of paths")
                continue
            resolved = [(base_dir / str(e)).resolve() for e in entries]
            for r in resolved:
                if not r.is_file():
                    problems.add(p, f"file not found: {r}")
            paths[key] = [str(r) for r in resolved]
    return DatasetConfig(kind, syn, paths, class_count, frac if frac is not None else 0.0)


def _budget(tree, problems):
    path = "budget."
    allowed = {f.name for f in fields(PerturbationBudget)}
    _unknown(tree, allowed, path, problems)
    kw = _typed_fields(tree, PerturbationBudget, path, problems, skip=("norms",))
    norms = tree.get("norms", ["linf"])
    if isinstance(norms, str):
        norms = norms.split("+")
    if not isinstance(norms, list) or not all(isinstance(n, str) for n in norms):
        problems.add(f"{path}norms", "expected a list of norm names or a string like 'linf+l2'")
        norms = ["linf"]
    kw["norms"] = frozenset(norms)
    return _build(PerturbationBudget, kw, path, problems)


def parse_config(tree, base_dir=".", overrides: dict | None = None) -> ExperimentConfig:
    """Validate a parsed YAML tree; raises :class:`ConfigError` listing every problem.

    ``overrides`` may set ``seed``, ``out`` and ``threads`` (command-line and
    environment values) before validation.
    """
    problems = _Problems()
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(["<root>: expected a mapping"])
    tree = dict(tree)
    for key, value in (overrides or {}).items():
        if value is not None:
            tree[key] = value
    base_dir = Path(base_dir)
    _unknown(tree, {f.name for f in fields(ExperimentConfig)}, "", problems)

    seed = _number(tree.get("seed", 0), "seed", problems, integer=True)
    if seed is not None and not 0 <= seed < 2 ** 64:
        problems.add("seed", "must be an unsigned 64-bit integer")
    seed = seed if seed is not None else 0
    threads = _number(tree.get("threads", 1), "threads", problems, integer=True)
    if threads is not None and threads < 1:
        problems.add("threads", "must be >= 1")
    out = tree.get("out", "runs/default")
    if not isinstance(out, str) or not out:
        problems.add("out", "expected a non-empty path string")
        out = "runs/default"

    dataset = _dataset_config(_section(tree, "dataset", "", problems), problems, base_dir)
    protector = _model_config(_section(tree, "protector", "", problems), "protector.", problems, seed)
    appropriator = _model_config(_section(tree, "appropriator", "", problems), "appropriator.", problems, seed,
                                 base=protector)
    budget = _budget(_section(tree, "budget", "", problems), problems)

    classes = dataset.class_count or (dataset.synthetic.classes if dataset.kind == "synthetic" else
                                      (10 if dataset.kind == "cifar-binary" else None))
    offset = _number(tree.get("permutation_offset", 1), "permutation_offset", problems, integer=True)
    if offset is not None and classes and offset % classes == 0:
        problems.add("permutation_offset", f"offset {offset} maps every class onto itself for {classes} classes")

    mask = tree.get("class_mask")
    if mask is not None:
        if not isinstance(mask, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in mask):
            problems.add("class_mask", "expected a list of class indices")
            mask = None
        else:
            if classes and any(not 0 <= c < classes for c in mask):
                problems.add("class_mask", f"class indices must lie in [0, {classes})")
            mask = tuple(sorted(set(mask)))

    an_tree = _section(tree, "analysis", "", problems)
    _unknown(an_tree, {f.name for f in fields(AnalysisConfig)}, "analysis.", problems)
    analysis = _build(AnalysisConfig, _typed_fields(an_tree, AnalysisConfig, "analysis.", problems),
                      "analysis.", problems) or AnalysisConfig()
    if analysis.diversity_models < 2:
        problems.add("analysis.diversity_models", "must be >= 2")
    if analysis.diversity_samples < 1:
        problems.add("analysis.diversity_samples", "must be >= 1")

    if budget is not None and protector.train is not None:
        if budget.n_models > 1 and protector.train.epochs % budget.n_models:
            problems.add("budget.n_models", f"{budget.n_models} equidistant checkpoints do not divide "
                                            f"{protector.train.epochs} epochs")
        for n, what in ((budget.n_models, "budget.n_models"),
                        (analysis.diversity_models, "analysis.diversity_models")):
            step = protector.train.epochs // n if n and protector.train.epochs % n == 0 else None
            if step and step % protector.train.snapshot_period:
                problems.add(what, f"checkpoints every {step} epochs are not on the snapshot grid "
                                   f"(period {protector.train.snapshot_period})")

    if problems:
        raise ConfigError(list(problems))
    return ExperimentConfig(seed, out, threads, dataset, protector, appropriator, budget, offset, mask, analysis)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read and validate a YAML config file (see :func:`parse_config`)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"--config: file not found: {path}"])
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    return parse_config(tree, path.parent, overrides)


def env_overrides(environ=None) -> dict:
    """Output directory and thread count taken from the environment."""
    environ = os.environ if environ is None else environ
    out = {}
    if environ.get(ENV_OUT):
        out["out"] = environ[ENV_OUT]
    if environ.get(ENV_THREADS):
        out["threads"] = environ[ENV_THREADS]
    return out


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(config, seed=seed)
