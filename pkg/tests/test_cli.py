"""Command-line workflows: train, oracle, q0, pts, eval, plot."""

import json

import pytest
import yaml

from softpo.cli import main
from tests.conftest import E1_ROOT


def _base_config(tmp_path, **overrides):
    data = {
        "env": {"kind": "target-set", "vocab_size": 2, "horizon": 2,
                "accepting": [[1, 1]]},
        "beta": 1.0,
        "q0": {"mode": "exact"},
        "run": {"total_steps": 30, "batch_size": 8,
                "model_update_interval": 5,
                "decoding": {"temperature": 1.0, "top_p": 1.0},
                "learning_rate": 0.05, "warmup_steps": 5,
                "seed": 0, "metrics_every": 1},
        "losses": {"online": {"variant": "terminal-q",
                              "base_loss": "cross-entropy"}},
        "eval": {"n_samples": 20, "k": 10,
                 "decoding": {"temperature": 0.4, "top_p": 0.95}},
        "out_dir": str(tmp_path / "out"),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in data:
            data[key].update(value)
        else:
            data[key] = value
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


class TestTrain:
    def test_train_writes_artifacts(self, tmp_path, capsys):
        cfg = _base_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
        out = tmp_path / "out"
        for name in ("metrics.csv", "metrics.jsonl", "final_params.json",
                     "staleness.jsonl", "config_echo.yaml"):
            assert (out / name).exists()
        assert "finished 30 steps" in capsys.readouterr().out

    def test_deterministic_runs_are_byte_identical(self, tmp_path):
        cfg = _base_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(cfg), "--seed", "7",
                     "--deterministic", "--out", str(a)]) == 0
        assert main(["train", "--config", str(cfg), "--seed", "7",
                     "--deterministic", "--out", str(b)]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "staleness.jsonl").read_bytes() == \
            (b / "staleness.jsonl").read_bytes()

    def test_missing_anchor_store_refuses_with_hint(self, tmp_path, capsys):
        cfg = _base_config(tmp_path, q0={"mode": "file",
                                         "path": str(tmp_path / "missing.jsonl")})
        assert main(["train", "--config", str(cfg), "--deterministic"]) == 2
        err = capsys.readouterr().err
        assert "q0" in err and "softpo q0" in err

    def test_invalid_config_exits_nonzero_with_field(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("env: {kind: target-set}\nrun: {total_steps: 1}\n"
                        "bogus_key: 1\n", encoding="utf-8")
        assert main(["train", "--config", str(path)]) == 2
        assert "bogus_key" in capsys.readouterr().err


class TestQ0Flow:
    def test_q0_then_train_from_file(self, tmp_path, capsys):
        store_path = tmp_path / "q0.jsonl"
        cfg = _base_config(tmp_path, q0={"mode": "file", "path": str(store_path),
                                         "n_samples": 400})
        assert main(["q0", "--config", str(cfg), "--seed", "3"]) == 0
        assert store_path.exists()
        record = json.loads(store_path.read_text().splitlines()[0])
        assert record["provenance"] == "monte-carlo"
        assert abs(record["q0"] - E1_ROOT) < 0.2
        assert main(["train", "--config", str(cfg), "--deterministic"]) == 0


class TestOracleDump:
    def test_tables_dumped_as_json_lines(self, tmp_path):
        cfg = _base_config(tmp_path)
        assert main(["oracle", "--config", str(cfg)]) == 0
        values = [json.loads(line) for line in
                  (tmp_path / "out" / "oracle_values.jsonl").read_text().splitlines()]
        assert len(values) == 1 + 2 + 4  # prefixes of length 0, 1, 2
        root = next(v for v in values if v["prefix"] == [])
        assert root["q"] == pytest.approx(E1_ROOT, abs=1e-12)
        policy_rows = [json.loads(line) for line in
                       (tmp_path / "out" / "oracle_policy.jsonl").read_text().splitlines()]
        assert len(policy_rows) == 1 + 2
        for row in policy_rows:
            assert sum(row["pi_star"]) == pytest.approx(1.0, abs=1e-9)


class TestPtsAndEval:
    def test_pts_annotates_dataset_file(self, tmp_path):
        cfg = _base_config(tmp_path, pts={"k": 10, "threshold": 0.2})
        data = tmp_path / "trajs.jsonl"
        data.write_text(
            '{"prompt": 0, "tokens": [1, 1], "reward": 0.0, '
            '"source": "offline-human"}\n', encoding="utf-8")
        out = tmp_path / "annotated.jsonl"
        rollouts = tmp_path / "probe_rollouts.jsonl"
        assert main(["pts", "--config", str(cfg), "--data", str(data),
                     "--out", str(out), "--rollouts-out", str(rollouts),
                     "--seed", "1"]) == 0
        record = json.loads(out.read_text().splitlines()[0])
        assert record["annotations"]
        assert rollouts.exists()

    def test_eval_reports_reference_statistics(self, tmp_path, capsys):
        cfg = _base_config(tmp_path)
        report_path = tmp_path / "report.json"
        assert main(["eval", "--config", str(cfg), "--seed", "2",
                     "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        entry = report["per_prompt"]["0"]
        assert 0.0 <= entry["pass_at_k"] <= 1.0
        assert "exact_pass_at_k" in entry

    def test_eval_on_trained_snapshot(self, tmp_path):
        cfg = _base_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
        params = tmp_path / "out" / "final_params.json"
        report_path = tmp_path / "trained.json"
        assert main(["eval", "--config", str(cfg), "--params", str(params),
                     "--seed", "2", "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert report["aggregate_pass_at_k"] >= 0.0


class TestImport:
    def test_import_validates_and_dedups(self, tmp_path, capsys):
        cfg = _base_config(tmp_path)
        raw = tmp_path / "external.jsonl"
        raw.write_text(
            '{"prompt": 0, "tokens": [1, 1], "reward": 0.0}\n'
            '{"prompt": 0, "tokens": [1, 1], "reward": 0.0}\n'
            '{"prompt": 0, "tokens": [0, 1], "reward": -1.0}\n',
            encoding="utf-8")
        out = tmp_path / "native.jsonl"
        assert main(["import", "--config", str(cfg), "--data", str(raw),
                     "--out", str(out), "--source", "offline-human"]) == 0
        lines = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(lines) == 2  # duplicate removed
        assert all(rec["source"] == "offline-human" for rec in lines)

    def test_import_rejects_invalid_records_with_line(self, tmp_path, capsys):
        cfg = _base_config(tmp_path)
        raw = tmp_path / "bad.jsonl"
        raw.write_text('{"prompt": 0, "tokens": [1, 5], "reward": 0.0}\n',
                       encoding="utf-8")
        assert main(["import", "--config", str(cfg), "--data", str(raw),
                     "--out", str(tmp_path / "native.jsonl")]) == 1
        assert "bad.jsonl:1" in capsys.readouterr().err

    def test_import_can_skip_invalid_records(self, tmp_path):
        cfg = _base_config(tmp_path)
        raw = tmp_path / "mixed.jsonl"
        raw.write_text(
            '{"prompt": 0, "tokens": [1, 5], "reward": 0.0}\n'
            '{"prompt": 0, "tokens": [1, 0], "reward": -1.0}\n',
            encoding="utf-8")
        out = tmp_path / "native.jsonl"
        assert main(["import", "--config", str(cfg), "--data", str(raw),
                     "--out", str(out), "--skip-invalid"]) == 0
        assert len(out.read_text().splitlines()) == 1


class TestPlot:
    def test_plot_renders_vector_chart(self, tmp_path):
        cfg = _base_config(tmp_path)
        assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
        chart = tmp_path / "chart.svg"
        assert main(["plot", "--metrics", str(tmp_path / "out" / "metrics.csv"),
                     "--out", str(chart), "--columns", "kl_opt",
                     "expected_reward"]) == 0
        head = chart.read_text()[:400]
        assert "<svg" in head
