import json

import numpy as np
import pytest
import yaml

from sepkit import cli, data
from sepkit.data import PoisonManifest
from sepkit.config import env_overrides, load_config, parse_config
from sepkit.errors import ConfigError

TINY = {
    "seed": 3,
    "dataset": {"kind": "synthetic",
                "synthetic": {"classes": 3, "per_class": 6, "test_per_class": 4, "image_size": 8}},
    "protector": {"arch": "cnn-small", "train": {"epochs": 4, "lr": 0.05, "snapshot_period": 1}},
    "appropriator": {"arch": "mlp-small"},
    "budget": {"norms": ["linf"], "eps_linf": "8/255", "steps": 2, "n_models": 2, "inner_steps": 2},
    "permutation_offset": 1,
    "analysis": {"diversity_models": 2, "diversity_samples": 10},
}


def merged(**changes):
    tree = json.loads(json.dumps(TINY))
    for dotted, value in changes.items():
        node = tree
        *head, last = dotted.split("__")
        for key in head:
            node = node.setdefault(key, {})
        node[last] = value
    return tree


@pytest.fixture
def config_file(tmp_path):
    def write(tree=None):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(TINY if tree is None else tree))
        return path
    return write


def run_cli(*args):
    return cli.run([str(a) for a in args])


class TestConfig:
    def test_fraction_and_inheritance(self):
        cfg = parse_config(TINY)
        assert cfg.budget.eps_linf == pytest.approx(8 / 255)
        assert cfg.appropriator.arch == "mlp-small"
        assert cfg.appropriator.train == cfg.protector.train
        assert cfg.protector.train.seed == 3

    def test_all_problems_reported_at_once(self):
        tree = merged(protector__arch="resnet", budget__steps="many", bogus=1)
        with pytest.raises(ConfigError) as exc:
            parse_config(tree)
        text = "\n".join(exc.value.problems)
        assert "protector.arch" in text and "budget.steps" in text and "bogus" in text

    def test_missing_idx_path_names_field(self, tmp_path):
        tree = merged(dataset={"kind": "idx", "idx": {"train_images": "nope", "train_labels": "nope",
                                                      "test_images": "nope"}})
        with pytest.raises(ConfigError) as exc:
            parse_config(tree, tmp_path)
        text = "\n".join(exc.value.problems)
        assert "dataset.idx.train_images: file not found" in text
        assert "dataset.idx.test_labels: missing" in text

    def test_identity_offset_rejected(self):
        with pytest.raises(ConfigError, match="permutation_offset"):
            parse_config(merged(permutation_offset=3))

    def test_single_diversity_model_rejected(self):
        with pytest.raises(ConfigError, match="diversity_models"):
            parse_config(merged(analysis__diversity_models=1))

    def test_repeats_validated(self):
        with pytest.raises(ConfigError, match="appropriator.repeats"):
            parse_config(merged(appropriator__repeats=0))
        assert parse_config(merged(appropriator__repeats=3)).appropriator.repeats == 3

    def test_checkpoint_grid_checked(self):
        with pytest.raises(ConfigError, match="n_models"):
            parse_config(merged(budget__n_models=3))
        with pytest.raises(ConfigError, match="snapshot grid"):
            parse_config(merged(protector__train__snapshot_period=4))

    def test_overrides(self):
        cfg = parse_config(TINY, overrides={"seed": 9, "out": "x", "threads": "2"})
        assert (cfg.seed, cfg.out, cfg.threads) == (9, "x", 2)
        assert env_overrides({"SEPKIT_OUT": "o", "SEPKIT_THREADS": "3", "OTHER": "1"}) == \
            {"out": "o", "threads": "3"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")


class TestExitCodes:
    def test_config_error_is_2_and_names_field(self, config_file, tmp_path, capsys):
        path = config_file(merged(dataset={"kind": "idx", "idx": {}}))
        assert run_cli("train", "--config", path, "--out", tmp_path / "run") == 2
        assert "dataset.idx.train_images" in capsys.readouterr().err
        # validation happens before any side effect
        assert not (tmp_path / "run").exists()

    def test_missing_container_is_3(self, config_file, tmp_path):
        assert run_cli("eval", "--config", config_file(), "--out", tmp_path, "--method", "sep") == 3

    def test_unknown_method_is_2(self, config_file, tmp_path):
        assert run_cli("craft", "--config", config_file(), "--out", tmp_path, "--method", "magic") == 2

    def test_vr_without_inner_steps_is_2(self, config_file, tmp_path):
        path = config_file(merged(budget__inner_steps=0))
        assert run_cli("craft", "--config", path, "--out", tmp_path, "--method", "sep-fa-vr") == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_is_4(self, config_file, tmp_path):
        path = config_file(merged(protector__train__lr=1e60))
        assert run_cli("train", "--config", path, "--out", tmp_path) == 4


def strip_timestamps(path):
    tree = json.loads(path.read_text())
    tree.pop("timestamps")
    tree["config"].pop("out")
    return tree


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    outs = [root / "a", root / "b"]
    for out in outs:
        assert run_cli("train", "--config", cfg, "--out", out) == 0
        for method in ("sep-fa-vr", "random"):
            assert run_cli("craft", "--config", cfg, "--out", out, "--method", method) == 0
    return cfg, outs


class TestPipeline:
    def test_summaries_identical_modulo_timestamps(self, pipeline):
        _, (a, b) = pipeline
        for rel in ("protector/summary.json", "craft/sep-fa-vr/summary.json"):
            assert strip_timestamps(a / rel) == strip_timestamps(b / rel)
        summary = json.loads((a / "protector/summary.json").read_text())
        assert summary["layout_version"] == cli.LAYOUT_VERSION and summary["command"] == "train"

    def test_containers_byte_identical(self, pipeline):
        _, (a, b) = pipeline
        for m in ("sep-fa-vr", "random"):
            assert (a / "craft" / m / "poisoned.sepd").read_bytes() == (b / "craft" / m / "poisoned.sepd").read_bytes()

    def test_thread_count_does_not_change_output(self, pipeline, tmp_path):
        cfg, (a, _) = pipeline
        out = tmp_path / "t"
        (out / "protector").mkdir(parents=True)
        for f in (a / "protector").glob("ck_epoch*.sepc"):
            (out / "protector" / f.name).write_bytes(f.read_bytes())
        assert run_cli("craft", "--config", cfg, "--out", out, "--method", "sep-fa-vr", "--threads", 3) == 0
        assert (out / "craft/sep-fa-vr/poisoned.sepd").read_bytes() == \
            (a / "craft/sep-fa-vr/poisoned.sepd").read_bytes()

    def test_manifest_records_method_and_budget(self, pipeline):
        _, (a, _) = pipeline
        m = json.loads((a / "craft/random/manifest.json").read_text())
        assert m["method"] == "random"
        vr = json.loads((a / "craft/sep-fa-vr/manifest.json").read_text())
        assert vr["budget"]["n_models"] == 2 and vr["budget"]["inner_steps"] == 2 and vr["budget"]["steps"] == 2
        assert vr["checkpoint_epochs"] == [2, 4]

    def test_eval_analyze_report(self, pipeline):
        cfg, (a, _) = pipeline
        assert run_cli("eval", "--config", cfg, "--out", a, "--method", "clean") == 0
        assert run_cli("eval", "--config", cfg, "--out", a, "--method", "sep-fa-vr") == 0
        assert run_cli("analyze", "--config", cfg, "--out", a) == 0
        assert run_cli("report", "--config", cfg, "--out", a) == 0
        for rel in ("eval/clean/confusion.csv", "eval/sep-fa-vr/recognition.csv", "analyze/diversity.csv",
                    "analyze/diversity.pgm", "analyze/recognition.csv", "report/report.csv"):
            assert (a / rel).is_file(), rel
        header = (a / "analyze/recognition.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,clean,")
        methods = [line.split(",")[0] for line in (a / "report/report.csv").read_text().splitlines()[1:]]
        assert methods == ["clean", "sep-fa-vr"]

    def test_zero_budget_equals_clean(self, pipeline, tmp_path):
        cfg_path, (a, _) = pipeline
        tree = merged(budget__eps_linf=0.0)
        cfg = tmp_path / "zero.yaml"
        cfg.write_text(yaml.safe_dump(tree))
        out = tmp_path / "z"
        (out / "protector").mkdir(parents=True)
        for f in (a / "protector").glob("ck_epoch*.sepc"):
            (out / "protector" / f.name).write_bytes(f.read_bytes())
        assert run_cli("craft", "--config", cfg, "--out", out, "--method", "sep") == 0
        assert run_cli("eval", "--config", cfg, "--out", out, "--method", "sep") == 0
        assert run_cli("eval", "--config", cfg, "--out", out, "--method", "clean") == 0
        assert (out / "eval/sep/train_report.csv").read_bytes() == (out / "eval/clean/train_report.csv").read_bytes()
        zero = json.loads((out / "eval/sep/summary.json").read_text())["result"]
        clean = json.loads((out / "eval/clean/summary.json").read_text())["result"]
        assert zero["test_acc"] == clean["test_acc"]

    def test_clean_save_as_poisoned_path(self, pipeline, tmp_path):
        cfg, (a, _) = pipeline
        c = load_config(cfg)
        train, _ = cli.load_datasets(c)
        manifest = PoisonManifest("identity", train.digest(), {"norms": ["linf"], "eps_linf": 0.0}, [], None, 0)
        path = tmp_path / "clean.sepd"
        data.save_poisoned(train, manifest, path, train)
        assert run_cli("eval", "--config", cfg, "--out", tmp_path / "o", "--poisoned", path) == 0
        got = json.loads((tmp_path / "o/eval/identity/summary.json").read_text())["result"]
        if not (a / "eval/clean/summary.json").is_file():
            assert run_cli("eval", "--config", cfg, "--out", a, "--method", "clean") == 0
        ref = json.loads((a / "eval/clean/summary.json").read_text())["result"]
        assert got["test_acc"] == ref["test_acc"]

    def test_repeats_average_over_seeds(self, pipeline, tmp_path):
        cfg_path, (a, _) = pipeline
        cfg = tmp_path / "rep.yaml"
        cfg.write_text(yaml.safe_dump(merged(appropriator__repeats=2)))
        out = tmp_path / "r"
        (out / "craft/sep-fa-vr").mkdir(parents=True)
        (out / "craft/sep-fa-vr/poisoned.sepd").write_bytes((a / "craft/sep-fa-vr/poisoned.sepd").read_bytes())
        res = cli.cmd_eval(load_config(cfg, {"out": str(out)}), "sep-fa-vr")
        assert len(res["test_acc_runs"]) == 2
        assert res["test_acc"] == pytest.approx(np.mean(res["test_acc_runs"]))
        assert res["targeted_shift"] == pytest.approx(np.mean(res["targeted_shift_runs"]))
        single = cli.cmd_eval(load_config(cfg_path, {"out": str(tmp_path / "s")}), None, out / "craft/sep-fa-vr/poisoned.sepd")
        assert single["test_acc"] == res["test_acc_runs"][0]

    def test_tampered_container_aborts(self, pipeline, tmp_path):
        cfg, (a, _) = pipeline
        blob = bytearray((a / "craft/random/poisoned.sepd").read_bytes())
        blob[-5] ^= 0xFF
        bad = tmp_path / "bad.sepd"
        bad.write_bytes(bytes(blob))
        assert run_cli("eval", "--config", cfg, "--out", tmp_path / "o", "--poisoned", bad) == 3


def test_make_arch_known_ids():
    assert set(cli.engine.ARCH_IDS) >= {"cnn-small", "mlp-small"}
    ds = data.LabeledDataset(np.zeros((1, 3, 8, 8)), [0], 3)
    assert cli.architecture("mlp-small", ds).input_shape == (3, 8, 8)
