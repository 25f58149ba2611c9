import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from amortlearn import autodiff as ad
from amortlearn.cli import EXIT_CONFIG, EXIT_GRADCHECK, EXIT_NUMERIC, EXIT_OK, main
from amortlearn.experiment import read_jsonl
from amortlearn.metrics import records_from_csv
from amortlearn.recipes import CONFIG_DIR

SMOKE = CONFIG_DIR / "smoke.yaml"


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("AMORT_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


def write_cfg(tmp_path, **overrides):
    raw = yaml.safe_load(SMOKE.read_text())
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw[section] = {**raw.get(section, {}), **values}
        else:
            raw[section] = values
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_smoke_train_writes_ten_records(output_root):
    assert main(["train", str(SMOKE)]) == EXIT_OK
    run = output_root / "runs" / "smoke"
    recs = read_jsonl(run / "metrics.jsonl")
    assert [r["update"] for r in recs] == list(range(10))
    assert all(len(r["step_losses"]) == 3 for r in recs)
    assert (run / "checkpoint.bin").exists()
    assert not list(run.glob("*.tmp"))


def test_resume_continues_from_persisted_counter(output_root):
    assert main(["train", str(SMOKE), "--max-updates", "4"]) == EXIT_OK
    run = output_root / "runs" / "smoke"
    assert len(read_jsonl(run / "metrics.jsonl")) == 4
    assert main(["train", str(SMOKE)]) == EXIT_OK
    resumed = (run / "metrics.jsonl").read_bytes()
    assert [r["update"] for r in read_jsonl(run / "metrics.jsonl")] == list(range(10))
    # identical to an uninterrupted run
    assert main(["train", str(SMOKE), "--output-dir", "straight"]) == EXIT_OK
    assert (output_root / "straight" / "metrics.jsonl").read_bytes() == resumed


def test_two_runs_byte_identical_metrics(output_root):
    for name in ("a", "b"):
        assert main(["train", str(SMOKE), "--output-dir", name]) == EXIT_OK
    assert (output_root / "a" / "metrics.jsonl").read_bytes() == (output_root / "b" / "metrics.jsonl").read_bytes()
    assert (output_root / "a" / "checkpoint.bin").read_bytes() == (output_root / "b" / "checkpoint.bin").read_bytes()


def test_resume_with_changed_config_is_rejected(output_root, tmp_path):
    assert main(["train", str(SMOKE), "--max-updates", "2", "--output-dir", "r"]) == EXIT_OK
    other = write_cfg(tmp_path, train={"learning_rate": 0.01})
    assert main(["train", str(other), "--output-dir", "r"]) == EXIT_CONFIG
    assert main(["train", str(other), "--output-dir", "r", "--fresh"]) == EXIT_OK


def test_eval_csv_rows_and_ood(output_root, tmp_path):
    cfg = write_cfg(tmp_path, eval={"k_values": [1, 5, 10], "ood_task": {"name": "linreg", "d": 4, "noise_std": 1.0, "n_train": 64, "n_valid": 16}})
    assert main(["train", str(cfg)]) == EXIT_OK
    ckpt = output_root / "runs" / "smoke" / "checkpoint.bin"
    assert main(["eval", str(ckpt), "--out", "e.csv"]) == EXIT_OK
    recs = records_from_csv((output_root / "e.csv").read_text())
    assert len(recs) == 6
    assert sum(r.ood for r in recs) == 3
    assert {r.steps for r in recs} == {1, 5, 10}


def test_eval_override_and_incompatibility(output_root, tmp_path):
    assert main(["train", str(SMOKE)]) == EXIT_OK
    ckpt = output_root / "runs" / "smoke" / "checkpoint.bin"
    good = tmp_path / "ev.yaml"
    good.write_text(yaml.safe_dump({"eval": {"k_values": [2], "n_tasks": 2}}))
    assert main(["eval", str(ckpt), "--eval-config", str(good)]) == EXIT_OK
    assert len(records_from_csv((ckpt.parent / "eval.csv").read_text())) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"eval": {"ood_task": {"name": "linreg", "d": 9}}}))
    assert main(["eval", str(ckpt), "--eval-config", str(bad)]) == EXIT_CONFIG
    assert main(["eval", str(tmp_path / "nope.bin")]) == EXIT_CONFIG
    (tmp_path / "junk.bin").write_bytes(b"junk")
    assert main(["eval", str(tmp_path / "junk.bin")]) == EXIT_CONFIG


def test_invalid_config_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: 1\ntask: {name: linreg}\ntrian: {}\n")
    assert main(["train", str(bad)]) == EXIT_CONFIG


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    from amortlearn import trainer

    def boom(*args, **kwargs):
        raise FloatingPointError("non-finite loss")

    monkeypatch.setattr(trainer, "greedy_train_step", boom)
    cfg = write_cfg(tmp_path, train={"max_skips": 2})
    assert main(["train", str(cfg)]) == EXIT_NUMERIC


def test_gradcheck_verb(capsys):
    assert main(["gradcheck", "--ops-only"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "matmul" in out and "gradcheck passed" in out


def test_gradcheck_mutation_exits_one(monkeypatch, capsys):
    original = ad.BACKWARD_RULES["exp"]
    monkeypatch.setitem(ad.BACKWARD_RULES, "exp", lambda g, out: tuple(-x for x in original(g, out)))
    assert main(["gradcheck", "--ops-only"]) == EXIT_GRADCHECK
    assert "FAIL" in capsys.readouterr().out


def test_bench_verb(output_root):
    assert main(["bench", "--out", "bench.json"]) == EXIT_OK
    rows = json.loads((output_root / "bench.json").read_text())
    assert len(rows) == 6 and all(r["ratio"] <= r["bound"] for r in rows)


def flow_cfg(tmp_path):
    raw = {
        "version": 1,
        "task": {"name": "gmm", "dim": 2, "n_train": 32, "n_valid": 16},
        "model": {"d_model": 16, "d_ffn": 32, "n_layers": 1, "max_context": 8, "masking_scheme": "non_causal"},
        "regime": {"regime": "implicit", "signal": "data", "steps_k": 2},
        "flow": {"n_integration_steps": 4},
        "train": {"meta_batch": 2, "refinement_steps": 2, "max_context": 8, "n_queries": 8, "total_updates": 3},
        "eval": {"n_tasks": 2, "k_values": [1, 2], "batch_size": 8, "n_samples": 16},
    }
    path = tmp_path / "flow.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_flow_pipeline_and_sample_verb(output_root, tmp_path):
    assert main(["train", str(flow_cfg(tmp_path)), "--output-dir", "flow"]) == EXIT_OK
    ckpt = output_root / "flow" / "checkpoint.bin"
    assert main(["eval", str(ckpt)]) == EXIT_OK
    recs = records_from_csv((ckpt.parent / "eval.csv").read_text())
    assert {r.metric for r in recs} == {"w1", "w2"}
    ctx = tmp_path / "ctx.csv"
    ctx.write_text("x0,x1\n" + "\n".join(f"{a},{b}" for a, b in np.random.default_rng(0).standard_normal((20, 2))))
    assert main(["sample", str(ckpt), "--context", str(ctx), "--n", "5", "--k", "2", "--out", "s.csv"]) == EXIT_OK
    lines = (output_root / "s.csv").read_text().splitlines()
    assert lines[0] == "x0,x1" and len(lines) == 6
    assert main(["sample", str(ckpt), "--context", str(ctx), "--n", "0", "--out", "empty.csv"]) == EXIT_OK
    assert (output_root / "empty.csv").read_text() == "x0,x1\n"
    ctx3 = tmp_path / "ctx3.csv"
    ctx3.write_text("1,2,3\n4,5,6\n")
    assert main(["sample", str(ckpt), "--context", str(ctx3), "--out", "x.csv"]) == EXIT_CONFIG


def test_sample_rejects_non_generative_checkpoint(output_root, tmp_path):
    assert main(["train", str(SMOKE)]) == EXIT_OK
    ctx = tmp_path / "ctx.csv"
    ctx.write_text("1,2\n")
    assert main(["sample", str(output_root / "runs/smoke/checkpoint.bin"), "--context", str(ctx), "--out", "s.csv"]) == EXIT_CONFIG


def test_scm_pipeline(output_root, tmp_path):
    raw = {
        "version": 1,
        "task": {"name": "scm", "d": 4, "n": 60},
        "leaf": {"d_model": 16, "d_ffn": 32, "n_layers": 1, "steps_k": 2, "samples_per_step": 20},
        "train": {"meta_batch": 2, "total_updates": 3},
        "eval": {"n_tasks": 2, "k_values": [1, 2], "ood_task": {"name": "scm", "d": 4, "n": 60, "ood": True}},
    }
    path = tmp_path / "scm.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["train", str(path), "--output-dir", "scm"]) == EXIT_OK
    assert main(["eval", str(output_root / "scm" / "checkpoint.bin")]) == EXIT_OK
    recs = records_from_csv((output_root / "scm" / "eval.csv").read_text())
    assert len(recs) == 4 and {r.metric for r in recs} == {"order_error"}


def test_recipe_list(capsys):
    assert main(["recipe", "--list"]) == EXIT_OK
    assert "flow-gmm2d" in capsys.readouterr().out
    assert main(["recipe", "nope"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    env = {**os.environ, "AMORT_OUTPUT_ROOT": str(tmp_path)}
    res = subprocess.run([sys.executable, "-m", "amortlearn", "bench", "--batches", "8", "--steps", "2"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "ratio=" in res.stdout
