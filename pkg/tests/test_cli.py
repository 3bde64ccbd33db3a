import json
import subprocess
import sys

import pytest

from robustwrn import cli


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_count_golden(capsys, tmp_path):
    code, out, _ = run(["count", "--depths", "d5-5-5", "--widths", "w10-10-10", "--classes", "10",
                        "--input-shape", "3x32x32", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "params=46160474" in out and "46.16M" in out
    assert json.loads((tmp_path / "count.json").read_text())["params"] == 46160474


def test_count_bad_token(capsys, tmp_path):
    code, _, err = run(["count", "--depths", "d5-5-x", "--widths", "w10-10-10", "--out", str(tmp_path)], capsys)
    assert code == 1
    assert err.count("\n") == 1 and "'x'" in err and err.startswith("error: validation:")


def test_unknown_flag_verb_key_and_missing_config(capsys, tmp_path):
    assert run(["count", "--bogus"], capsys)[0] == 1
    assert run(["fly"], capsys)[0] == 1
    assert run([], capsys)[0] == 1
    assert run(["count", "--set", "train.nope=1"], capsys)[0] == 1
    assert run(["count", "--set", "train.epochs"], capsys)[0] == 1
    assert run(["count", "--config", str(tmp_path / "missing.json")], capsys)[0] == 1
    (tmp_path / "bad.json").write_text('{"arch": {"depths": "d1-1-1", "colour": 3}}')
    assert run(["count", "--config", str(tmp_path / "bad.json")], capsys)[0] == 1
    # a value that parses but fails validation
    assert run(["count", "--set", "train.lr0=-1"], capsys)[0] == 1


def test_mc_check(capsys, tmp_path):
    code, out, _ = run(["mc-check", "--N", "400", "--n", "100", "--trials", "200", "--seed", "7", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert "bracket=[10.000000, 30.000000]" in out and out.strip().endswith("PASS")
    assert json.loads((tmp_path / "mc_check.json").read_text())["pass"] is True
    assert run(["mc-check", "--N", "4", "--n", "5"], capsys)[0] == 1


def test_dry_run_explore(capsys, tmp_path):
    code, out, _ = run(["explore", "--dry-run", "--out", str(tmp_path), "--set", "explore.mode=grid",
                        "--set", "explore.values=[1,2]", "--set", "explore.seeds=[0,1,2]"], capsys)
    assert code == 0
    assert "runs=24" in out and "params=" in out and "flops=" in out
    assert not (tmp_path / "records.csv").exists()


def test_config_file_and_overrides(capsys, tmp_path):
    cfg = {"arch": {"depths": "d2-2-2", "widths": "w2-2-2", "num_classes": 10, "input_shape": [3, 32, 32]}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = run(["count", "--config", str(tmp_path / "c.json"), "--set", "arch.widths=\"w1-1-1\"",
                        "--out", str(tmp_path)], capsys)
    assert code == 0 and "spec=d2-2-2/w1-1-1" in out


def test_output_dir_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "envout"))
    assert run(["count"], capsys)[0] == 0
    assert (tmp_path / "envout" / "count.json").exists()


def test_bounds_and_eval_on_fresh_network(capsys, tmp_path):
    small = ["--set", "data.per_class=4", "--set", "data.test_per_class=3", "--set", "attack.steps=2",
             "--seed", "3", "--out", str(tmp_path)]
    code, out, _ = run(["bounds"] + small, capsys)
    assert code == 0 and "residual_form_bound=" in out and (tmp_path / "bounds.csv").exists()
    code, out, _ = run(["eval"] + small, capsys)
    assert code == 0 and "robust_acc=" in out and (tmp_path / "eval_report.json").exists()
    code, out, _ = run(["attack"] + small, capsys)
    assert code == 0 and (tmp_path / "adversarial.npy").exists()


def test_train_then_eval_checkpoint_and_explore_report(capsys, tmp_path):
    tiny = ["--set", "data.per_class=4", "--set", "data.test_per_class=2", "--set", "data.image_size=8",
            "--input-shape", "3x8x8", "--set", "train.epochs=1", "--set", "train.batch_size=8",
            "--set", "train.inner_attack.steps=1", "--set", "attack.steps=1", "--depths", "d1-0-0",
            "--widths", "w1-1-1"]
    code, out, err = run(["train", "--out", str(tmp_path / "t")] + tiny, capsys)
    assert code == 0, err
    assert (tmp_path / "t" / "last" / "manifest.json").exists() and (tmp_path / "t" / "stats.csv").exists()
    code, out, err = run(["eval", "--checkpoint", str(tmp_path / "t" / "last"), "--out", str(tmp_path / "e")] + tiny, capsys)
    assert code == 0, err
    ex = tiny + ["--set", "explore.mode=stage", "--set", "explore.axis=width", "--set", "explore.stage=1",
                 "--set", "explore.values=[1,2]", "--set", "explore.measure_lipschitz=false", "--out", str(tmp_path / "x")]
    code, out, err = run(["explore"] + ex, capsys)
    assert code == 0, err
    code, out, err = run(["report", "--out", str(tmp_path / "x")] + tiny, capsys)
    assert code == 0, err
    assert "Top-5" in out and (tmp_path / "x" / "report.txt").exists()


def test_report_missing_records(capsys, tmp_path):
    assert run(["report", "--out", str(tmp_path)], capsys)[0] == 1


def test_runtime_failure_exit_code(capsys, tmp_path):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.json").write_text("{not json")
    code, _, err = run(["eval", "--checkpoint", str(tmp_path / "ck"), "--out", str(tmp_path)], capsys)
    assert code == 2 and err.startswith("error: runtime:")


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "robustwrn.cli", "count", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "params=" in r.stdout
