"""Command-line behavior: artifacts, determinism, exit codes."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from bysgnn.cli import main
from bysgnn.data import load_visits_csv

TINY_MODEL_CFG = ("lift_dim=8\ntemporal_dim=16\nsemantic_dim=12\n"
                  "raw_embedding_dim=32\nattention_heads=2\n"
                  "gcn_hidden=8\ngcn_out_dim=4\n")


def _write_spec(path, **overrides):
    spec = {"n_pois": 6, "n_categories": 3, "days": 35, "clusters": 2,
            "noise": 0.3, "regime_shift_day": 0}
    spec.update(overrides)
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in spec.items()))


def _synth(tmp_path, name="data", seed=1, **overrides) -> Path:
    spec = tmp_path / f"{name}_spec.cfg"
    _write_spec(spec, **overrides)
    out = tmp_path / name
    assert main(["synth", "--spec", str(spec), "--out", str(out),
                 "--seed", str(seed)]) == 0
    return out


def _train(tmp_path, data_dir, name="run", epochs=1, extra=()) -> Path:
    cfg = tmp_path / f"{name}_model.cfg"
    cfg.write_text(TINY_MODEL_CFG)
    out = tmp_path / name
    rc = main(["train", "--data", str(data_dir), "--out", str(out),
               "--config", str(cfg), "--epochs", str(epochs),
               "--seed", "0", "--quiet", *extra])
    assert rc == 0
    return out


class TestSynth:
    def test_default_spec_dimensions(self, tmp_path, capsys):
        out = tmp_path / "default"
        assert main(["synth", "--out", str(out), "--seed", "0"]) == 0
        ds, _ = load_visits_csv(out / "visits.csv")
        assert ds.n_pois == 40
        assert ds.n_hours == 90 * 24
        spec_text = (out / "synth_spec.txt").read_text()
        assert "n_pois=40" in spec_text and "n_categories=8" in spec_text

    def test_same_seed_byte_identical(self, tmp_path):
        a = _synth(tmp_path, "a", seed=9)
        b = _synth(tmp_path, "b", seed=9)
        for name in ("visits.csv", "metadata.csv", "synth_spec.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_nonempty_dir_needs_force(self, tmp_path, capsys):
        out = _synth(tmp_path, "c", seed=0)
        spec = tmp_path / "c_spec.cfg"
        assert main(["synth", "--spec", str(spec), "--out", str(out),
                     "--seed", "0"]) == 2
        assert "--force" in capsys.readouterr().err
        assert main(["synth", "--spec", str(spec), "--out", str(out),
                     "--seed", "0", "--force"]) == 0

    def test_bad_spec_key_lists_valid(self, tmp_path, capsys):
        spec = tmp_path / "bad.cfg"
        spec.write_text("wombats=9\n")
        assert main(["synth", "--spec", str(spec), "--out",
                     str(tmp_path / "x")]) == 2
        assert "n_pois" in capsys.readouterr().err


class TestTrain:
    def test_missing_inputs_exit_2(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "visits.csv" in capsys.readouterr().err

    def test_artifacts_and_snapshot(self, tmp_path):
        data = _synth(tmp_path)
        run = _train(tmp_path, data, extra=["--ablate", "no_semantics"])
        assert (run / "checkpoint.npz").exists()
        assert (run / "training_log.csv").exists()
        snapshot = json.loads((run / "config_snapshot.json").read_text())
        assert snapshot["train_config"]["ablations"] == ["no_semantics"]
        assert snapshot["train_config"]["epochs"] == 1
        assert snapshot["model_config"]["temporal_dim"] == 16
        assert snapshot["threads"] == 1

    def test_rerun_reproduces_log(self, tmp_path):
        data = _synth(tmp_path)
        run_a = _train(tmp_path, data, name="run_a", epochs=2)
        run_b = _train(tmp_path, data, name="run_b", epochs=2)
        assert (run_a / "training_log.csv").read_bytes() == \
            (run_b / "training_log.csv").read_bytes()

    def test_cli_flag_beats_config_file(self, tmp_path):
        data = _synth(tmp_path)
        cfg = tmp_path / "both.cfg"
        cfg.write_text(TINY_MODEL_CFG + "epochs=5\nbatch_size=16\n")
        out = tmp_path / "prec"
        assert main(["train", "--data", str(data), "--out", str(out),
                     "--config", str(cfg), "--epochs", "1", "--quiet"]) == 0
        snapshot = json.loads((out / "config_snapshot.json").read_text())
        assert snapshot["train_config"]["epochs"] == 1      # flag wins
        assert snapshot["train_config"]["batch_size"] == 16  # file beats default

    def test_threads_env_mirrored(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BYSGNN_THREADS", "1")
        data = _synth(tmp_path)
        run = _train(tmp_path, data, name="thr")
        snapshot = json.loads((run / "config_snapshot.json").read_text())
        assert snapshot["threads"] == 1


class TestEval:
    def test_weekly_periodic_baselines_are_zero(self, tmp_path):
        data = _synth(tmp_path, noise=0.0)
        run = _train(tmp_path, data)
        out = tmp_path / "report"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.npz"),
                     "--data", str(data), "--out", str(out)]) == 0
        with open(out / "metrics_report.csv") as fh:
            rows = {r["method"]: r for r in csv.DictReader(fh)}
        assert "mape_masked_count" in rows["naive_seasonal"]
        for method in ("naive_seasonal", "historical_average"):
            assert float(rows[method]["mae"]) == 0.0
            assert float(rows[method]["mape"]) == 0.0
            assert float(rows[method]["rmse"]) == 0.0
        assert "improvement_vs_best_baseline" in rows
        text = (out / "metrics_report.txt").read_text()
        assert "Naive Seasonal" in text and "improvement" in text

    def test_node_mismatch_exit_2_with_diff(self, tmp_path, capsys):
        data = _synth(tmp_path)
        run = _train(tmp_path, data)
        other = _synth(tmp_path, "other", seed=2, n_pois=5)
        rc = main(["eval", "--checkpoint", str(run / "checkpoint.npz"),
                   "--data", str(other), "--out", str(tmp_path / "r2")])
        assert rc == 2
        assert "poi_0005" in capsys.readouterr().err


class TestInspectGraph:
    def test_fifty_node_export(self, tmp_path):
        # 40 POIs + 9 categories + 1 global meta-node = 50 x 50 adjacency
        data = _synth(tmp_path, "big", n_pois=40, n_categories=9, days=15)
        run = _train(tmp_path, data, name="bigrun")
        out = tmp_path / "graph"
        assert main(["inspect-graph", "--checkpoint", str(run / "checkpoint.npz"),
                     "--data", str(data), "--timestamp", "2019-01-10T06:00:00Z",
                     "--out", str(out)]) == 0
        from bysgnn.graphgen import read_labeled_matrix_csv
        labels, adjacency = read_labeled_matrix_csv(out / "adjacency.csv")
        assert adjacency.shape == (50, 50)
        assert labels[-1] == "global" and labels[0] == "poi_0000"
        assert sum(1 for l in labels if l.startswith("category:")) == 9
        alpha = float((out / "gate_alpha.txt").read_text().strip())
        assert 0.0 < alpha < 1.0

    def test_export_matches_in_process_graph(self, tmp_path):
        data = _synth(tmp_path)
        run = _train(tmp_path, data)
        out = tmp_path / "graph"
        stamp = "2019-01-20T12:00:00Z"
        assert main(["inspect-graph", "--checkpoint", str(run / "checkpoint.npz"),
                     "--data", str(data), "--timestamp", stamp,
                     "--out", str(out)]) == 0
        from bysgnn import autodiff as ad
        from bysgnn.data import parse_timestamp, zscore_apply
        from bysgnn.graphgen import read_labeled_matrix_csv
        from bysgnn.training import load_checkpoint
        ckpt = load_checkpoint(run / "checkpoint.npz")
        ds, _ = load_visits_csv(data / "visits.csv")
        model, inputs = ckpt.build_model(ds)
        end = ds.index_of(parse_timestamp(stamp))
        norm = zscore_apply(inputs.augmented, ckpt.stats)
        with ad.no_grad():
            _, cap = model.forward(norm[:, end - 23:end + 1][None], capture=True)
        _, exported = read_labeled_matrix_csv(out / "adjacency.csv")
        np.testing.assert_array_equal(exported, cap.adjacency[0])
        # thresholded entries follow the keep rule within each row
        for row in exported:
            top = row.max()
            if top <= 0:
                continue
            kept = row[row != 0.0]
            assert np.all((kept / top) ** 2.5 > 0.15)

    def test_timestamp_out_of_range_exit_2(self, tmp_path):
        data = _synth(tmp_path)
        run = _train(tmp_path, data)
        rc = main(["inspect-graph", "--checkpoint", str(run / "checkpoint.npz"),
                   "--data", str(data), "--timestamp", "2025-01-01T00:00:00Z",
                   "--out", str(tmp_path / "g2")])
        assert rc == 2

    def test_first_hours_lack_window_exit_2(self, tmp_path):
        data = _synth(tmp_path)
        run = _train(tmp_path, data)
        rc = main(["inspect-graph", "--checkpoint", str(run / "checkpoint.npz"),
                   "--data", str(data), "--timestamp", "2019-01-01T05:00:00Z",
                   "--out", str(tmp_path / "g3")])
        assert rc == 2


class TestAblateCommand:
    def test_report_files(self, tmp_path):
        data = _synth(tmp_path, n_pois=4, n_categories=2)
        cfg = tmp_path / "m.cfg"
        cfg.write_text(TINY_MODEL_CFG)
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(data), "--out", str(out),
                     "--variants", "no_space", "--seeds", "0",
                     "--config", str(cfg), "--epochs", "1", "--quiet"]) == 0
        text = (out / "ablation_report.txt").read_text()
        assert "no_space" in text and "full" in text
        with open(out / "ablation_report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["variant"] for r in rows] == ["full", "no_space"]
        assert rows[1]["change_mae_pct"] != ""
