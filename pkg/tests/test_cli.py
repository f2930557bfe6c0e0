import json
import subprocess
import sys

import pytest

from fpgrow.cli import main

EXP = {
    "schema_version": 1,
    "model": {"n_layers": 2, "hidden_dim": 16, "mlp_dim": 32, "n_heads": 2, "vocab_size": 30, "max_seq_len": 12},
    "tasks": {
        "old": {"kind": "copy_reverse", "alphabet_size": 8, "seq_len": 4},
        "new": {"kind": "modular_arith", "alphabet_size": 8, "seq_len": 4, "alphabet_offset": 14, "op": "shift", "shift": 3},
    },
    "pretrain": {"steps": 40, "eval_every": 20, "loss_span": "full", "target_accuracy": 0.0},
    "train": {"steps": 12, "eval_every": 4, "checkpoint_every": 4},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def exp(tmp_path):
    d = dict(EXP, paths={"out_dir": str(tmp_path / "run")})
    path = tmp_path / "e.json"
    path.write_text(json.dumps(d))
    return path


def test_grow_k1_exit_1(capsys, exp, tmp_path):
    assert run(capsys, "pretrain", "--config", exp)[0] == 0
    code, _, err = run(capsys, "grow", "--in", tmp_path / "run/base.fpgx", "--out", tmp_path / "g.fpgx", "--k", 1)
    assert code == 1
    e = json.loads(err)
    assert e["error"] == "PlanError" and e["tool_version"]


def test_bad_args_exit_1(capsys):
    code, _, err = run(capsys, "grow", "--nope")
    assert code == 1 and json.loads(err)["error"] == "UsageError"
    code, _, err = run(capsys, "verify", "--original", "/nonexistent", "--grown", "/nonexistent")
    assert code == 1 and "message" in json.loads(err)


def test_verify_self_and_failure(capsys, exp, tmp_path):
    run(capsys, "pretrain", "--config", exp)
    base = tmp_path / "run/base.fpgx"
    code, out, _ = run(capsys, "verify", "--original", base, "--grown", base, "--samples", 5, "--seq-len", 6)
    rep = json.loads(out)["report"]
    assert code == 0 and rep["max_abs_dev"] == 0 and rep["status"] == "PASS"
    run(capsys, "grow", "--in", base, "--out", tmp_path / "n.fpgx", "--noise", 0.5)
    code, out, _ = run(capsys, "verify", "--original", base, "--grown", tmp_path / "n.fpgx", "--samples", 5, "--seq-len", 6)
    assert code == 2 and json.loads(out)["report"]["status"] == "FAIL"


def pipeline(capsys, exp, tmp_path):
    run_dir = tmp_path / "run"
    assert run(capsys, "pretrain", "--config", exp)[0] == 0
    code, out, _ = run(capsys, "grow", "--in", run_dir / "base.fpgx", "--out", run_dir / "g.fpgx",
                       "--layers", "1", "--seed", 3)
    assert code == 0
    receipt = json.loads(out)["receipt"]
    assert run(capsys, "verify", "--original", run_dir / "base.fpgx", "--grown", run_dir / "g.fpgx",
               "--samples", 10, "--seq-len", 8)[0] == 0
    assert run(capsys, "finetune", "--config", exp, "--in", run_dir / "g.fpgx", "--name", "gf")[0] == 0
    assert run(capsys, "finetune", "--config", exp, "--in", run_dir / "base.fpgx", "--name", "sft")[0] == 0
    code, out, _ = run(capsys, "check-frozen", "--before", run_dir / "g.fpgx", "--after", run_dir / "gf.fpgx")
    assert code == 0 and json.loads(out)["status"] == "PASS"
    code, out, _ = run(capsys, "check-frozen", "--before", run_dir / "base.fpgx", "--after", run_dir / "sft.fpgx",
                       "--mask", run_dir / "g.fpgx.mask.json")
    assert code == 1  # mask belongs to the grown shapes
    code, out, _ = run(capsys, "select-layers", "--before", run_dir / "base.fpgx", "--after", run_dir / "sft.fpgx", "--top", 1)
    assert code == 0 and len(json.loads(out)["layers"]) == 1
    assert run(capsys, "analyze-rank", "--checkpoints", run_dir / "sft_checkpoints", "--out", run_dir / "grid.csv")[0] == 0
    task = tmp_path / "icl.json"
    task.write_text(json.dumps({"kind": "kv_recall", "alphabet_size": 8, "seq_len": 2}))
    for name in ("base", "gf", "sft"):
        assert run(capsys, "fv", "--model", run_dir / f"{name}.fpgx", "--task", task, "--k-top", 2,
                   "--prompts", 6, "--out", run_dir / f"fv_{name}.json")[0] == 0
    code, out, _ = run(capsys, "fv-compare", "--a", run_dir / "fv_base.json", "--b", run_dir / "fv_base.json")
    cmp_ = json.loads(out)
    assert code == 0 and cmp_["overlap"] == 2 and cmp_["cosine"] == pytest.approx(1.0)
    assert run(capsys, "fv-compare", "--a", run_dir / "fv_base.json", "--b", run_dir / "fv_gf.json")[0] == 0
    assert run(capsys, "sweep", "--config", exp, "--in", run_dir / "base.fpgx", "--n", "1,2")[0] == 0
    return receipt, {p.relative_to(run_dir): p.read_bytes() for p in sorted(run_dir.rglob("*")) if p.is_file()}


def test_pipeline_receipt_and_determinism(capsys, exp, tmp_path):
    receipt, first = pipeline(capsys, exp, tmp_path)
    h, p = 16, 32
    assert receipt["trainable_params"] == h * p + p + p * h
    orig = json.loads(first[next(k for k in first if str(k) == "g.fpgx.receipt.json")])["receipt"]["original_params"]
    assert receipt["trainable_fraction"] == (h * p + p + p * h) / orig
    for k in ("sft.csv", "gf.csv", "sweep_n1.csv", "sweep_n2.csv", "grid.csv", "grid.csv.json", "sweep.json"):
        assert any(str(x) == k for x in first), k
    import shutil
    shutil.rmtree(tmp_path / "run")
    _, second = pipeline(capsys, exp, tmp_path)
    assert first.keys() == second.keys()
    diff = [k for k in first if first[k] != second[k]]
    assert not diff


def test_json_outputs_carry_version(capsys, exp, tmp_path):
    _, files = pipeline(capsys, exp, tmp_path)
    for k, v in files.items():
        if str(k).endswith(".json"):
            assert "tool_version" in json.loads(v), k


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fpgrow.cli", "grow", "--in", "x", "--out", "y", "--k", "1"],
                       capture_output=True, text=True)
    assert r.returncode == 1
    err = json.loads(r.stderr)
    assert err["exit_code"] == 1 and err["error"] == "PlanError"
