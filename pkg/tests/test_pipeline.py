"""测试子命令流程：pretrain → train-gan → generate → evaluate，toy-demo 与命令行退出码"""

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from src.bcgan_toolkit import config
from src.bcgan_toolkit import data_io
from src.bcgan_toolkit import experiment
from src.bcgan_toolkit import pipeline
from src.bcgan_toolkit.compat_eval import CompatReport
from src.bcgan_toolkit.errors import ConfigError, DataIngestError
from src.bcgan_toolkit.main import main

from tests.conftest import slow


def _tiny(tmp_path, **sections) -> dict:
    raw = {
        "name": "tiny",
        "seed": 3,
        "output_dir": str(tmp_path / "out"),
        "dataset": {"kind": "two_gaussians", "n_train": 120, "n_test": 60},
        "gan": {"hidden": [8], "epochs": 1, "steps_per_epoch": 2, "batch_size": 16, "n_critic": 1,
                "noise_dim": 4, "embedding_dim": 2},
        "pretrain": {"k": 2, "hidden": [8], "epochs": 1},
        "evaluation": {"roster": ["DT (d=10)"], "interpretability": False},
        "toy_demo": {"grid_resolution": 10, "rf_n_trees": 2, "rf_max_depth": 3},
    }
    for name, values in sections.items():
        raw[name] = {**raw.get(name, {}), **values}
    return raw


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setattr(config, "NUM_WORKERS", 1)


def _manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# 测试 1：单个子命令
# ---------------------------------------------------------------------------

class TestPretrain:

    def test_writes_classifiers_and_manifest(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path))
        manifest_path = pipeline.cmd_pretrain(cfg)
        manifest = _manifest(manifest_path)
        assert manifest["format"] == config.FORMAT_MANIFEST
        assert manifest["command"] == "pretrain"
        assert [m["member"] for m in manifest["classifiers"]] == [0, 1]
        assert all(m["train_size"] == 60 for m in manifest["classifiers"])
        assert (cfg.out_path / "resolved_config.pretrain.yaml").exists()
        assert len(pipeline.load_pretrained(manifest_path)) == 2

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path))
        first = pipeline.cmd_pretrain(cfg).read_bytes()
        assert pipeline.cmd_pretrain(cfg).read_bytes() == first

    def test_requires_seed(self, tmp_path):
        raw = _tiny(tmp_path)
        raw.pop("seed")
        with pytest.raises(ConfigError):
            pipeline.cmd_pretrain(experiment.from_dict(raw))

    def test_load_rejects_other_manifest(self, tmp_path):
        path = pipeline.write_manifest(tmp_path / "x", tmp_path, "generate", 0, [])
        with pytest.raises(ConfigError):
            pipeline.load_pretrained(path)


class TestTrainGenerate:

    def test_bc_without_pretrain(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 100.0}))
        with pytest.raises(ConfigError):
            pipeline.cmd_train_gan(cfg, progress=False)

    def test_base_gan_needs_no_pretrain(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 0.0}))
        ckpt = pipeline.cmd_train_gan(cfg, progress=False)
        history = pd.read_csv(ckpt.parent / pipeline.LOSS_HISTORY)
        assert len(history) == 2
        assert _manifest(ckpt.parent / "manifest.json")["steps"] == 2

    def test_loss_history_rerun_is_byte_identical(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 0.0}))
        first = (pipeline.cmd_train_gan(cfg, progress=False).parent / pipeline.LOSS_HISTORY).read_bytes()
        second = (pipeline.cmd_train_gan(cfg, progress=False).parent / pipeline.LOSS_HISTORY).read_bytes()
        assert first == second

    def test_generate_defaults_to_train_size(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 0.0}))
        pipeline.cmd_train_gan(cfg, progress=False)
        path = pipeline.cmd_generate(cfg)
        frame = pd.read_csv(path)
        assert len(frame) == 120
        assert path.with_suffix(".schema.yaml").exists()

    def test_generate_rejects_zero_rows(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 0.0}))
        pipeline.cmd_train_gan(cfg, progress=False)
        with pytest.raises(ConfigError):
            pipeline.cmd_generate(cfg, n=0)

    def test_generate_missing_checkpoint(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path))
        with pytest.raises(ConfigError):
            pipeline.cmd_generate(cfg, n=10)


# ---------------------------------------------------------------------------
# 测试 2：完整流程
# ---------------------------------------------------------------------------

class TestFullChain:

    def test_pretrain_train_generate_evaluate(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 100.0},
                                         evaluation={"interpretability": True, "precision_ks": [1, 2],
                                                     "l1_cs": [0.01]}))
        pipeline.cmd_pretrain(cfg)
        pipeline.cmd_train_gan(cfg, progress=False)
        pipeline.cmd_generate(cfg, n=80)
        report = pipeline.cmd_evaluate(cfg)

        report_dir = cfg.out_path / config.REPORT_SUBDIR
        loaded = CompatReport.load_json(report_dir / pipeline.REPORT_JSON)
        assert loaded == report
        assert [r.name for r in report.results] == ["DT (d=10)"]
        assert report.metadata["lambda_bc"] == 100.0
        assert set(report.interpretability) == {"precision_at_k", "f1_feature_selection"}
        frame = pd.read_csv(report_dir / pipeline.REPORT_CSV)
        assert list(frame["algorithm"]) == ["DT (d=10)", "Avg."]
        for command in ("pretrain", "train-gan", "generate", "evaluate"):
            assert (cfg.out_path / f"resolved_config.{command}.yaml").exists()
        manifest = _manifest(report_dir / "manifest.json")
        importance = [f["path"] for f in manifest["files"] if f["format"] == config.FORMAT_IMPORTANCE_CSV]
        assert importance == ["report/importances_real.csv", "report/importances_generated.csv"]
        assert list(pd.read_csv(cfg.out_path / importance[0]).columns) == ["feature_index", "name", "importance"]

    def test_evaluate_with_exported_real(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, gan={"lambda_bc": 0.0}))
        train, test = pipeline.load_datasets(experiment.validate(cfg))
        real_path, _ = data_io.export_dataset(train, tmp_path / "real.csv", harden=False)
        test_path, _ = data_io.export_dataset(test, tmp_path / "test.csv", harden=False)
        report = pipeline.cmd_evaluate(cfg, synthetic=real_path, real=real_path, test=test_path)
        assert report.average == 1.0

    def test_csv_without_test_path_scales_with_train_half(self, tmp_path):
        values = np.arange(40, dtype=float)
        _, test_idx = data_io.split_half_indices(40, seed=3)
        values[test_idx[-1]] = 1000.0
        path = tmp_path / "one.csv"
        pd.DataFrame({"v": values, "y": ["a", "b"] * 20}).to_csv(path, index=False)
        cfg = experiment.from_dict(_tiny(tmp_path, dataset={
            "source": "csv", "train_path": str(path), "label": "y", "continuous": ["v"]}))
        train, test = pipeline.load_datasets(experiment.validate(cfg))
        assert train.schema.columns[0].max < 1000.0
        assert train.features.max() == 1.0 and test.features.max() == 1.0


# ---------------------------------------------------------------------------
# 测试 3：toy-demo
# ---------------------------------------------------------------------------

class TestToyDemo:

    def test_writes_points_grids_and_summary(self, tmp_path):
        cfg = experiment.from_dict(_tiny(tmp_path, toy_demo={"lambda_bc": 10.0}))
        summary_path = pipeline.cmd_toy_demo(cfg, progress=False)
        manifest = _manifest(summary_path.parent / "manifest.json")
        assert len(manifest["files"]) == 4 + 4 + 1
        summary = pd.read_csv(summary_path)
        assert list(summary["method"]) == config.TOY_METHODS
        assert (summary["n_points"] == 120).all()
        grid = pd.read_csv(summary_path.parent / "grid_bwgan.csv", index_col=0)
        assert grid.shape == (10, 10)

    def test_rejects_non_2d(self, tmp_path, mixed_csv):
        cfg = experiment.from_dict(_tiny(tmp_path, dataset={
            "source": "csv", "train_path": str(mixed_csv), "label": "label",
            "discrete": ["color"], "continuous": ["age", "income"]}))
        with pytest.raises(DataIngestError):
            pipeline.cmd_toy_demo(cfg, progress=False)


# ---------------------------------------------------------------------------
# 测试 4：命令行
# ---------------------------------------------------------------------------

class TestMain:

    def _config_file(self, tmp_path, **sections) -> str:
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump(_tiny(tmp_path, **sections)), encoding="utf-8")
        return str(path)

    def test_pretrain_succeeds(self, tmp_path):
        assert main(["pretrain", "--config", self._config_file(tmp_path), "--no-progress"]) == 0

    def test_missing_pretrain_is_config_error(self, tmp_path, capsys):
        code = main(["train-gan", "--config", self._config_file(tmp_path), "--lambda-bc", "100"])
        assert code == 2
        line = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert line["error"] == "config"

    def test_missing_csv_is_data_error(self, tmp_path):
        path = tmp_path / "broken.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        cfg = self._config_file(tmp_path, dataset={"source": "csv", "train_path": str(path), "label": "y"})
        assert main(["pretrain", "--config", cfg]) == 3

    def test_seed_override(self, tmp_path):
        cfg = self._config_file(tmp_path)
        assert main(["train-gan", "--config", cfg, "--seed", "11", "--lambda-bc", "0", "--no-progress"]) == 0
        snapshot = yaml.safe_load((tmp_path / "out" / "resolved_config.train-gan.yaml").read_text(encoding="utf-8"))
        assert snapshot["seed"] == 11
        assert snapshot["gan"]["seed"] == 11


# ---------------------------------------------------------------------------
# 测试 5：多种子的玩具实验趋势 (长时间运行)
# ---------------------------------------------------------------------------

def _toy_summary(tmp_path, seed: int, **dataset) -> pd.DataFrame:
    raw = yaml.safe_load((config.CONFIGS_DIR / "toy2d.yaml").read_text(encoding="utf-8"))
    raw["seed"] = seed
    raw["output_dir"] = str(tmp_path / f"seed{seed}")
    raw["dataset"].update(dataset)
    summary_path = pipeline.cmd_toy_demo(experiment.from_dict(raw), progress=False)
    return pd.read_csv(summary_path).set_index("method")


@slow
class TestToyTrends:
    """5 个种子上的中位数比较，只断言方向"""

    def test_rf_accuracy_ordering(self, tmp_path):
        runs = [_toy_summary(tmp_path, seed)["rf_test_accuracy"] for seed in range(5)]
        median = pd.concat(runs, axis=1).median(axis=1)
        assert median["bwgan"] >= median["wgan"] - 0.005
        assert median["bwgan"] > median["acgan"]
        assert median["real"] >= 0.98

    def test_mislabel_rate_mixture(self, tmp_path):
        rates = {"wgan": [], "bwgan": []}
        for seed in range(5):
            summary = _toy_summary(tmp_path, seed, kind="gaussian_mixture", n_classes=3)
            for method in rates:
                rates[method].append(float(summary.loc[method, "mislabel_rate"]))
        assert np.median(rates["bwgan"]) <= np.median(rates["wgan"])
