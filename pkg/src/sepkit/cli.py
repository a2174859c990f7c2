"""``sepkit`` command line: train, craft, eval, analyze and report.

Every stage reads the same YAML config and writes under its output
directory::

    <out>/protector/        ck_epoch*.sepc, train_report.csv, summary.json
    <out>/craft/<method>/   poisoned.sepd, manifest.json, craft_log.csv, summary.json
    <out>/eval/<name>/      train_report.csv, confusion.csv, recognition.csv,
                            validation_gap.csv, summary.json
    <out>/analyze/          diversity.{csv,json,pgm}, recognition.csv, summary.json
    <out>/report/           report.csv, summary.json

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, crafting, data, engine, training
from .config import ExperimentConfig, env_overrides, load_config
from .crafting import METHODS, TargetPermutation
from .errors import BudgetViolationError, ConfigError, DataError, NumericalError

LAYOUT_VERSION = 1
CLEAN = "clean"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared plumbing


def load_datasets(cfg: ExperimentConfig):
    """Return ``(train, test)`` clean splits for the configured source."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return (data.gen_synthetic(ds.synthetic, cfg.seed, "train"),
                data.gen_synthetic(ds.synthetic, cfg.seed, "test"))
    if ds.kind == "idx":
        p = ds.paths
        train = data.load_idx(p["train_images"], p["train_labels"], ds.class_count, "train")
        test = data.load_idx(p["test_images"], p["test_labels"], train.class_count, "test")
        return train, test
    return (data.load_cifar_binary(ds.paths["train"], ds.class_count or 10, "train"),
            data.load_cifar_binary(ds.paths["test"], ds.class_count or 10, "test"))


def split_train(cfg: ExperimentConfig, train: data.LabeledDataset):
    """``(fit part, held-out part or None)``; applied identically to clean and poisoned sets."""
    if cfg.dataset.heldout_fraction <= 0:
        return train, None
    return data.split_heldout(train, cfg.dataset.heldout_fraction, cfg.seed)


def architecture(arch_id: str, dataset: data.LabeledDataset) -> engine.ArchitectureSpec:
    return engine.make_arch(arch_id, dataset.input_shape, dataset.class_count)


def permutation(cfg: ExperimentConfig, dataset: data.LabeledDataset) -> TargetPermutation:
    return TargetPermutation(dataset.class_count, cfg.permutation_offset)


def stage_dir(cfg: ExperimentConfig, *parts) -> Path:
    return cfg.out_dir.joinpath(*parts)


def write_summary(directory: Path, command: str, cfg: ExperimentConfig, started: float, **payload) -> None:
    summary = {
        "layout_version": LAYOUT_VERSION,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        **payload,
        # excluded from the determinism contract
        "timestamps": {"started": started, "finished": time.time()},
    }
    analysis.write_json(directory / "summary.json", summary)


def load_protector(cfg: ExperimentConfig, train: data.LabeledDataset) -> training.CheckpointSet:
    directory = stage_dir(cfg, "protector")
    arch = architecture(cfg.protector.arch, train)
    cks = training.CheckpointSet.load(directory, arch)
    if not len(cks):
        raise DataError(f"no protector checkpoints under {directory}; run `sepkit train` first")
    return cks


def poisoned_path(cfg: ExperimentConfig, method: str) -> Path:
    return stage_dir(cfg, "craft", method, "poisoned.sepd")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig) -> dict:
    """Train the protector and keep its snapshots."""
    started = time.time()
    train, test = load_datasets(cfg)
    fit, _ = split_train(cfg, train)
    arch = architecture(cfg.protector.arch, fit)
    cks, report = training.train(arch, fit, cfg.protector.train, test=test)
    out = stage_dir(cfg, "protector")
    out.mkdir(parents=True, exist_ok=True)
    cks.save(out)
    report.write_csv(out / "train_report.csv")
    result = {"epochs": cks.epochs, "final_test_acc": report.test_acc[-1], "final_train_acc": report.train_acc[-1],
              "config_digest": cfg.protector.train.digest(), "train_samples": len(fit)}
    write_summary(out, "train", cfg, started, result=result)
    return result


def cmd_craft(cfg: ExperimentConfig, method: str) -> dict:
    """Craft perturbations for the full training split with ``method``."""
    if method not in METHODS:
        raise ConfigError([f"--method: unknown method {method!r} (expected one of {', '.join(METHODS)})"])
    budget = cfg.budget
    if method == "sep-fa-vr" and budget.inner_steps < 1:
        raise ConfigError(["budget.inner_steps: sep-fa-vr needs at least one inner step"])
    if method == "random" and budget.norms != {"linf"}:
        raise ConfigError(["budget.norms: the random-noise baseline is defined for linf budgets only"])
    started = time.time()
    train, _ = load_datasets(cfg)
    perm = permutation(cfg, train)
    members = []
    if method != "random":
        cks = load_protector(cfg, train)
        n = 1 if method == "single-model" else budget.n_models
        members = list(training.select_checkpoints(cks, n)) if method != "single-model" else [cks.final]
    log = crafting.CraftLog()
    kwargs = {"threads": cfg.threads}
    if method != "random":
        kwargs["log"] = log
    poisoned, manifest = crafting.craft(method, train, members, budget, perm, seed=cfg.seed,
                                       class_mask=cfg.class_mask, **kwargs)
    out = stage_dir(cfg, "craft", method)
    out.mkdir(parents=True, exist_ok=True)
    data.save_poisoned(poisoned, manifest, out / "poisoned.sepd", train)
    analysis.write_json(out / "manifest.json", manifest.to_dict())
    log.write_csv(out / "craft_log.csv")
    result = {"method": method, "norm_stats": manifest.norm_stats, "checkpoint_epochs": manifest.checkpoint_epochs}
    write_summary(out, "craft", cfg, started, result=result)
    return result


def cmd_eval(cfg: ExperimentConfig, method: str | None = None, poisoned: str | Path | None = None) -> dict:
    """Train the appropriator on a (poisoned) set and test on clean data.

    ``method="clean"`` trains on the clean split (the reference baseline).
    With ``appropriator.repeats > 1`` accuracy, confusion and targeted shift
    are means over that many training seeds; per-run curves come from the first.
    """
    started = time.time()
    train, test = load_datasets(cfg)
    if method == CLEAN and poisoned is None:
        released, name = train, CLEAN
    else:
        path = Path(poisoned) if poisoned is not None else poisoned_path(cfg, method or "sep-fa-vr")
        if not path.is_file():
            raise DataError(f"poisoned container not found: {path}")
        released, meta = data.load_poisoned(path, clean=train)
        name = method or meta["method"]
    fit, held = split_train(cfg, released)
    arch = architecture(cfg.appropriator.arch, fit)
    base = cfg.appropriator.train
    runs = []
    for r in range(cfg.appropriator.repeats):
        tcfg = replace(base, seed=base.seed + r)
        cks, report = training.train(arch, fit, tcfg, tracked=fit if cfg.analysis.recognition else None, test=test)
        runs.append((cks, report, training.evaluate(cks.final, test)))
    cks, report, ev = runs[0]
    confusion = np.mean([e.confusion for _, _, e in runs], axis=0)
    out = stage_dir(cfg, "eval", name)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "train_report.csv")
    analysis.write_confusion_csv(out / "confusion.csv", confusion)
    result = {"method": name, "test_acc": float(np.mean([e.accuracy for _, _, e in runs])),
              "undefined_rows": ev.undefined_rows}
    if len(runs) > 1:
        result["test_acc_runs"] = [e.accuracy for _, _, e in runs]
    if name != CLEAN or cfg.permutation_offset:
        result["targeted_shift"] = analysis.targeted_shift(confusion, permutation(cfg, train))
        if len(runs) > 1:
            result["targeted_shift_runs"] = [analysis.targeted_shift(e.confusion, permutation(cfg, train))
                                             for _, _, e in runs]
    if report.recognition is not None:
        analysis.write_curve_csv(out / "recognition.csv", {"released_train": analysis.recognition_curve(report)})
    if held is not None and cfg.analysis.validation_gap:
        gap = analysis.validation_gap(report, held, list(cks))
        gap.write_csv(out / "validation_gap.csv")
        result["final_gap"] = gap.gap[-1]
    write_summary(out, "eval", cfg, started, result=result)
    return result


def cmd_analyze(cfg: ExperimentConfig, methods=None) -> dict:
    """Gradient diversity of protector snapshots and cross-training recognition.

    Recognition curves train the appropriator architecture on clean data and
    track how often each crafted set (and the clean set) is classified
    correctly after every epoch.
    """
    started = time.time()
    train, test = load_datasets(cfg)
    fit, _ = split_train(cfg, train)
    out = stage_dir(cfg, "analyze")
    result = {}
    if cfg.analysis.diversity:
        cks = load_protector(cfg, train)
        models = list(training.select_checkpoints(cks, cfg.analysis.diversity_models))
        k = min(cfg.analysis.diversity_samples, len(fit))
        div = analysis.gradient_diversity(models, fit.images[:k], fit.labels[:k])
        out.mkdir(parents=True, exist_ok=True)
        div.write_csv(out / "diversity.csv")
        div.write_pgm(out / "diversity.pgm")
        analysis.write_json(out / "diversity.json", div.to_dict())
        result["diversity_mean_off_diagonal"] = div.mean_off_diagonal()
    if cfg.analysis.recognition:
        methods = [m for m in (methods or METHODS) if poisoned_path(cfg, m).is_file()]
        if methods:
            tracked = {CLEAN: train}
            for m in methods:
                tracked[m], _ = data.load_poisoned(poisoned_path(cfg, m), clean=train)
            # one tracked set holding every version of the training samples
            stacked = data.LabeledDataset(
                np.concatenate([d.images for d in tracked.values()]),
                np.concatenate([d.labels for d in tracked.values()]), train.class_count, "train")
            arch = architecture(cfg.appropriator.arch, fit)
            _, report = training.train(arch, fit, cfg.appropriator.train, tracked=stacked, test=test)
            n = len(train)
            curves = {name: report.recognition[:, i * n:(i + 1) * n].mean(axis=1)
                      for i, name in enumerate(tracked)}
            out.mkdir(parents=True, exist_ok=True)
            analysis.write_curve_csv(out / "recognition.csv", curves)
            result["recognition_final"] = {k: float(v[-1]) for k, v in curves.items()}
    if not result:
        raise DataError("nothing to analyze: enable analysis.diversity or craft a method first")
    write_summary(out, "analyze", cfg, started, result=result)
    return result


def cmd_report(cfg: ExperimentConfig) -> dict:
    """Collect every eval summary into one table."""
    started = time.time()
    eval_root = stage_dir(cfg, "eval")
    rows = []
    for summary in sorted(eval_root.glob("*/summary.json")):
        res = json.loads(summary.read_text())["result"]
        rows.append({"method": res["method"], "test_acc": res["test_acc"],
                     "targeted_shift": res.get("targeted_shift", "")})
    if not rows:
        raise DataError(f"no eval results under {eval_root}; run `sepkit eval` first")
    order = {m: i for i, m in enumerate((CLEAN,) + METHODS)}
    rows.sort(key=lambda r: order.get(r["method"], len(order)))
    out = stage_dir(cfg, "report")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "test_acc", "targeted_shift"])
        w.writeheader()
        w.writerows(rows)
    write_summary(out, "report", cfg, started, rows=rows)
    return {"rows": rows}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepkit", description="Self-ensemble protective perturbations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train the protector and save snapshots"),
                            ("craft", "craft a poisoned training set"),
                            ("eval", "train the appropriator on a released set"),
                            ("analyze", "gradient diversity and recognition curves"),
                            ("report", "tabulate eval results")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--threads", type=int, help="cap on worker threads")
        p.add_argument("--out", help="run directory (overrides config and $SEPKIT_OUT)")
        if name in ("craft", "eval", "analyze"):
            p.add_argument("--method", help=f"one of {', '.join(METHODS)}" + (" or clean" if name == "eval" else ""))
        if name == "eval":
            p.add_argument("--poisoned", help="container to evaluate (default: the method's craft output)")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = env_overrides()
        for key in ("seed", "threads", "out"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        cfg = load_config(args.config, overrides)
        method = getattr(args, "method", None)
        if args.command == "eval" and method not in (None, CLEAN) + METHODS:
            raise ConfigError([f"--method: unknown method {method!r}"])
        if args.command == "craft" and method is None:
            raise ConfigError(["--method: required for craft"])
        if args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "craft":
            result = cmd_craft(cfg, method)
        elif args.command == "eval":
            result = cmd_eval(cfg, method, args.poisoned)
        elif args.command == "analyze":
            result = cmd_analyze(cfg, [method] if method else None)
        else:
            result = cmd_report(cfg)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, BudgetViolationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
