import csv
import json

import numpy as np
import pytest

from rankkit.checkpoint import load_model, read_checkpoint
from rankkit.config import ExperimentConfig, config_from_dict, load_config
from rankkit.errors import ConfigError

from cli_pipeline import full_pipeline, run, write_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipe")
    cfg = write_config(work / "cfg.json")
    return cfg, full_pipeline(work / "run", cfg)


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="60%"):
        config_from_dict({"optimizer": {"warmup_fraction": 0.7}})
    with pytest.raises(ConfigError, match="multiplicative"):
        config_from_dict({"model": {"embedding": {"aggregation": "multiplication"}}})
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({"modle": {}})
    with pytest.raises(ConfigError, match="unknown config keys at model"):
        config_from_dict({"model": {"hiden": [3]}})


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig().validate()
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_gen_data_line_counts(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"data": {"cold_rows": 300, "rows_per_window": 200, "test_rows": 50,
                                                      "replay_sessions": 10}})
    code, out = run("gen-data", "--config", cfg, "--out", tmp_path / "d", "--windows", 3)
    assert code == 0
    counts = {p.name: len(p.read_text().splitlines()) for p in (tmp_path / "d").iterdir()}
    assert counts == {"window_0.jsonl": 300, "window_1.jsonl": 200, "window_2.jsonl": 200, "test.jsonl": 50,
                      "replay.jsonl": 10}
    row = json.loads((tmp_path / "d" / "window_1.jsonl").read_text().splitlines()[0])
    assert set(row) == {"dense", "ids", "labels", "ts", "session", "pos"}
    assert row["ts"] // 86400 == 1


def test_pipeline_outputs(pipeline):
    _, paths = pipeline
    report = json.loads(paths["report"].read_text())
    assert report["quantized"] is True
    assert report["replay"]["matched"] > 0
    assert set(report["auc_delta_vs_compare"]) == {"click", "like", "comment"}
    assert abs(report["auc_delta_vs_compare"]["click"]) < 0.02
    _, manifest = read_checkpoint(paths["checkpoint"])
    assert manifest["kind"] == "cold" and set(manifest["posteriors"]) == {"click", "like", "comment"}
    assert any(e["name"].startswith("fisher/") for e in manifest["tensors"])
    with open(paths["report_csv"]) as fh:
        assert next(csv.reader(fh)) == ["metric", "task", "value"]


def test_eval_on_training_window_beats_chance(pipeline, tmp_path):
    _, paths = pipeline
    code, out = run("eval", "--checkpoint", paths["checkpoint"], "--data", paths["data"] / "window_0.jsonl")
    assert code == 0 and json.loads(out)["auc"] > 0.5


def test_quantize_reports_reduction_and_refuses_twice(pipeline, tmp_path):
    cfg, paths = pipeline
    code, out = run("quantize", "--checkpoint", paths["checkpoint"], "--out", tmp_path / "q.lrk")
    dim = json.loads(cfg.read_text()).get("model", {}).get("embedding", {}).get("dim", 8)
    # int8 payload plus two float64 per row against float64 rows
    assert code == 0 and abs(json.loads(out)["reduction"] - (1 - (dim + 16) / (8 * dim))) < 1e-12
    code, _ = run("quantize", "--checkpoint", paths["quantized"], "--out", tmp_path / "qq.lrk")
    assert code == 3


def test_incremental_chain_and_topology_error(pipeline, tmp_path):
    cfg, paths = pipeline
    data = paths["data"]
    code, _ = run("gen-data", "--config", cfg, "--out", tmp_path / "d", "--windows", 3)
    assert code == 0
    cold = paths["checkpoint"]
    prev = cold
    for w in (1, 2):
        out = tmp_path / f"inc{w}.lrk"
        code, text = run("train", "--config", cfg, "--data", tmp_path / "d" / f"window_{w}.jsonl",
                         "--out-checkpoint", out, "--from-checkpoint", prev, "--cold-checkpoint", cold)
        assert code == 0
        _, manifest = read_checkpoint(out)
        assert manifest["kind"] == "incremental" and manifest["meta"]["steps"] == 20
        prev = out
    other = write_config(tmp_path / "other.json", {"model": {"hidden": [9]}})
    code, _ = run("train", "--config", other, "--data", data / "window_0.jsonl", "--out-checkpoint",
                  tmp_path / "x.lrk", "--from-checkpoint", cold, "--cold-checkpoint", cold)
    assert code == 2
    code, _ = run("train", "--config", cfg, "--data", data / "window_0.jsonl", "--out-checkpoint",
                  tmp_path / "x.lrk", "--from-checkpoint", cold)
    assert code == 2
    code, _ = run("train", "--config", cfg, "--data", data / "window_0.jsonl", "--out-checkpoint",
                  tmp_path / "x.lrk", "--from-checkpoint", paths["quantized"], "--cold-checkpoint", cold)
    assert code == 3


def test_training_twice_is_identical(pipeline, tmp_path):
    cfg, paths = pipeline
    code, _ = run("train", "--config", cfg, "--data", paths["data"] / "window_0.jsonl", "--out-checkpoint",
                  tmp_path / "again.lrk")
    assert code == 0
    assert (tmp_path / "again.lrk").read_bytes() == paths["checkpoint"].read_bytes()


def test_exit_codes(tmp_path):
    assert run("gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path / "d")[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"optimizer": {"warmup_fraction": 0.9}}')
    assert run("gen-data", "--config", bad, "--out", tmp_path / "d")[0] == 2
    assert run("eval", "--checkpoint", tmp_path / "nope.lrk", "--data", tmp_path / "nope.jsonl")[0] == 3
    assert run("ablate", "--variants", "mlp-baseline,+wings")[0] == 2
    garbage = tmp_path / "g.jsonl"
    garbage.write_text('{"dense": [1.0]}\n')
    cfg = write_config(tmp_path / "c.json")
    assert run("train", "--config", cfg, "--data", garbage, "--out-checkpoint", tmp_path / "m.lrk")[0] == 3


def test_divergence_exit_code(pipeline, tmp_path, capsys):
    _, paths = pipeline
    cfg = write_config(tmp_path / "hot.json", {"optimizer": {"peak_learning_rate": 1e308}})
    with np.errstate(all="ignore"):
        code, _ = run("train", "--config", cfg, "--data", paths["data"] / "window_0.jsonl", "--out-checkpoint",
                      tmp_path / "m.lrk")
    assert code == 4
    assert "diverged at step" in capsys.readouterr().err


def test_single_class_eval_slice_exits_zero(pipeline, tmp_path):
    _, paths = pipeline
    rows = [json.loads(l) for l in (paths["data"] / "test.jsonl").read_text().splitlines()]
    neg = [r for r in rows if r["labels"]["comment"] == 0][:50]
    (tmp_path / "neg.jsonl").write_text("".join(json.dumps(r) + "\n" for r in neg))
    code, out = run("eval", "--checkpoint", paths["checkpoint"], "--data", tmp_path / "neg.jsonl")
    assert code == 0 and json.loads(out)["per_task"]["comment"]["auc"] is None


def test_bandit_sim_csv(tmp_path):
    code, out = run("bandit-sim", "--rounds", 50, "--seeds", 3, "--out", tmp_path / "r.csv")
    assert code == 0 and set(json.loads(out)) == {"thompson", "greedy", "random"}
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * (3 * 50 + 50)
    assert {r["seed"] for r in rows} == {"0", "1", "2", "mean"}


def test_bandit_sim_with_checkpoint(pipeline):
    cfg, paths = pipeline
    code, out = run("bandit-sim", "--config", cfg, "--checkpoint", paths["checkpoint"], "--rounds", 30, "--seeds", 1)
    assert code == 0 and "thompson" in json.loads(out)


def test_ablate_rows_follow_request(pipeline, tmp_path):
    cfg, paths = pipeline
    d = paths["data"]
    code, out = run("ablate", "--config", cfg, "--variants", "mlp-baseline", "--data", d / "window_0.jsonl",
                    "--test-data", d / "test.jsonl", "--seeds", 1, "--out-csv", tmp_path / "a.csv")
    assert code == 0
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["mlp-baseline"]
    assert float(rows[0]["delta_vs_baseline"]) == 0.0


def test_global_flags_in_either_position(tmp_path):
    a = run("--seed", 4, "bandit-sim", "--rounds", 5, "--seeds", 1)
    b = run("bandit-sim", "--seed", 4, "--rounds", 5, "--seeds", 1)
    assert a == b and a[0] == 0
