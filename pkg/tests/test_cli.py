import csv
import json

import numpy as np
import pytest
from PIL import Image

from segreg import cli
from segreg.metrics import MetricsReport
from segreg.trainer import ExperimentConfig


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny dataset plus trained fs and joint runs, shared by the tests."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    assert run_cli("gen-data", "--out", data, "--count", 24, "--size", 32,
                   "--seed", 3) == 0
    cfg = ExperimentConfig(data_count=24, image_size=32, val_count=3,
                           annotation_rate=0.125, n_iterations=1, epoch_scale=0.01,
                           batch_size=4, seg_steps_cap=4, reg_pairs_cap=8, seed=5)
    cfg_path = root / "cfg.json"
    cfg.to_json(cfg_path)
    runs = root / "runs"
    for method in ("fs", "joint"):
        assert run_cli("train", "--data", data, "--method", method,
                       "--config", cfg_path, "--out", runs) == 0
    return {"root": root, "data": data, "cfg": cfg_path, "runs": runs,
            "fs": runs / "fs_0.125_5", "joint": runs / "joint_0.125_5"}


class TestGenData:
    def test_layout_and_count(self, workspace):
        data = workspace["data"]
        assert len(list((data / "images").glob("*.png"))) == 24
        assert len(list((data / "masks").glob("*.png"))) == 24
        img = np.asarray(Image.open(next(iter(sorted((data / "images").glob("*.png"))))))
        assert img.shape == (32, 32) and img.dtype == np.uint16

    def test_too_small_count_exits_2(self, tmp_path, capsys):
        assert run_cli("gen-data", "--out", tmp_path / "d", "--count", 5) == 2
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_run_directory_name_and_artifacts(self, workspace):
        run = workspace["fs"]
        assert run.is_dir()
        for name in ("config.json", "split.json", "run.json", "training_log.csv",
                     "epochs.csv"):
            assert (run / name).is_file(), name
        assert (run / "final" / "seg" / "manifest.json").is_file()
        assert json.loads((run / "run.json").read_text()) == {
            "method": "fs", "rate": 0.125, "seed": 5}

    def test_joint_saves_both_models_and_history(self, workspace):
        run = workspace["joint"]
        assert (run / "final" / "seg" / "manifest.json").is_file()
        assert (run / "final" / "reg" / "manifest.json").is_file()
        history = json.loads((run / "history.json").read_text())
        assert [h["iteration"] for h in history] == [0, 1]
        assert (run / "checkpoints" / "iter_1" / "state.json").is_file()
        assert list((run / "pseudo" / "iter_1").glob("*_fused.png"))

    def test_rate_and_seed_flags_override_config(self, workspace, tmp_path):
        out = tmp_path / "runs"
        assert run_cli("train", "--data", workspace["data"], "--method", "fs",
                       "--config", workspace["cfg"], "--rate", 0.25, "--seed", 9,
                       "--out", out) == 0
        run = out / "fs_0.25_9"
        assert run.is_dir()
        assert ExperimentConfig.from_json(run / "config.json").annotation_rate == 0.25

    def test_size_mismatch_exits_2(self, workspace, tmp_path, capsys):
        bad = tmp_path / "d"
        assert run_cli("gen-data", "--out", bad, "--count", 10, "--size", 16) == 0
        assert run_cli("train", "--data", bad, "--method", "fs",
                       "--config", workspace["cfg"], "--out", tmp_path) == 2
        assert "16x16" in capsys.readouterr().err

    def test_unknown_method_rejected_by_parser(self, workspace):
        with pytest.raises(SystemExit):
            run_cli("train", "--data", workspace["data"], "--method", "magic")


class TestEval:
    def test_fs_metrics_csv_and_summary(self, workspace):
        run = workspace["fs"]
        assert run_cli("eval", "--run", run, "--data", workspace["data"]) == 0
        with open(run / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "rate", "image_id", "dsc", "hd"]
        n_test = len(json.loads((run / "split.json").read_text())["test"])
        assert len(rows) == 1 + n_test
        assert all(r[0] == "fs" and r[1] == "0.125" for r in rows[1:])
        summary = json.loads((run / "summary.json").read_text())
        assert 0.0 <= summary["aggregates"]["fs"]["dsc_mean"] <= 1.0

    def test_joint_eval_adds_combined_method(self, workspace):
        run = workspace["joint"]
        assert run_cli("eval", "--run", run, "--data", workspace["data"]) == 0
        report = MetricsReport.load_csv(run / "metrics.csv")
        assert report.methods() == ["joint", "combined"]
        assert "joint_vs_combined_dsc" in json.loads(
            (run / "summary.json").read_text())["p_values"]

    def test_eval_is_deterministic(self, workspace):
        run = workspace["joint"]
        first = (run / "metrics.csv").read_bytes()
        assert run_cli("eval", "--run", run, "--data", workspace["data"]) == 0
        assert (run / "metrics.csv").read_bytes() == first


class TestCompare:
    def test_merged_report_with_pairwise_p(self, workspace, tmp_path, capsys):
        out = tmp_path / "comparison.json"
        merged = tmp_path / "merged.csv"
        assert run_cli("compare", "--runs", workspace["fs"], workspace["joint"],
                       "--out", out, "--csv", merged) == 0
        payload = json.loads(out.read_text())
        assert set(payload["aggregates"]) == {"fs", "joint", "combined"}
        assert {"fs_vs_joint_dsc", "fs_vs_combined_dsc",
                "joint_vs_combined_dsc"} <= set(payload["p_values"])
        report = MetricsReport.load_csv(merged)
        assert set(report.methods()) == {"fs", "joint", "combined"}
        assert "dsc=" in capsys.readouterr().out


class TestPanel:
    def test_renders_grid_for_unannotated_image(self, workspace):
        run = workspace["joint"]
        image_id = json.loads((run / "split.json").read_text())["train_unannotated"][0]
        assert run_cli("panel", "--run", run, "--image-id", image_id) == 0
        panel = np.asarray(Image.open(run / "panels" / f"{image_id}.png"))
        assert panel.shape == (3 * 36, 1 * 36)  # one iteration, 32px cells, 2px pad

    def test_missing_artifacts_exit_2(self, workspace, capsys):
        assert run_cli("panel", "--run", workspace["fs"], "--image-id", "x") == 2
        assert "error:" in capsys.readouterr().err
