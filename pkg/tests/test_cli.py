import csv
import json
import shutil
import subprocess
import sys

import pytest

from gslab.cli import main, overhead_percentage
from gslab.fl import RunRecord

SMALL = """
seed = 0
workers = 1
[data]
num_classes = 4
examples_per_class = 12
side = 4
[model]
hidden_dims = [8]
[fl]
num_clients = 6
clients_per_round = 3
rounds = 5
batch_size = 8
[attack]
iterations = 5
restarts = 1
num_images = {images}
eot_samples = 2
latent_dim = 2
generator_steps = 5
"""


def _write(tmp_path, extra="", images=3, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(SMALL.format(images=images) + extra)
    return str(p)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_emits_one_row_per_round(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", _write(tmp_path), "--out", str(out)]) == 0
    assert len(_rows(out / "metrics.csv")) == 5
    assert (out / "accuracy.tsv").exists() and (out / "summary.json").exists()


def test_train_is_reproducible(tmp_path):
    cfg = _write(tmp_path, '[defense]\nname = "censor"\ntrials = 3\n')
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", cfg, "--out", str(a)]) == 0
    assert main(["train", "--config", cfg, "--out", str(b), "--workers", "8"]) == 0
    ra = RunRecord.from_json((a / "run_record.json").read_text())
    rb = RunRecord.from_json((b / "run_record.json").read_text())
    assert ra.numerics() == rb.numerics()


def test_seed_flag_overrides_config(tmp_path):
    cfg = _write(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", cfg, "--out", str(a), "--seed", "1"])
    main(["train", "--config", cfg, "--out", str(b), "--seed", "2"])
    assert json.loads((a / "run_record.json").read_text())["seed"] == 1
    assert (a / "metrics.csv").read_text() != (b / "metrics.csv").read_text()


def test_unknown_key_exits_with_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "[defense]\nnmae = \"censor\"\n")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "defense.nmae" in err["detail"]


def test_bad_value_names_the_field(tmp_path, capsys):
    cfg = _write(tmp_path, "[bench]\nrepetitions = 0\n")
    assert main(["bench", "--config", cfg]) == 2
    assert "bench.repetitions" in capsys.readouterr().err


def test_unknown_attack_name_exits(tmp_path, capsys):
    cfg = _write(tmp_path)
    text = open(cfg).read().replace("[attack]\n", '[attack]\nname = "dlg"\n')
    open(cfg, "w").write(text)
    assert main(["attack", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "attack.name" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2


def test_attack_sweep_rows(tmp_path):
    out = tmp_path / "atk"
    assert main(["attack", "--config", _write(tmp_path, images=10), "--out", str(out)]) == 0
    rows = _rows(out / "attacks.csv")
    assert len(rows) == 11
    assert rows[-1]["image"] == "mean"
    assert all(r["lpips"] == "" for r in rows)
    assert len(list(out.glob("*.pgm"))) == 20


@pytest.mark.parametrize("attack", ["eot", "latent"])
def test_attack_variants_run(tmp_path, attack):
    cfg = _write(tmp_path, '[defense]\nname = "censor"\ntrials = 2\n')
    text = open(cfg).read().replace("[attack]\n", f'[attack]\nname = "{attack}"\n')
    open(cfg, "w").write(text)
    out = tmp_path / attack
    assert main(["attack", "--config", cfg, "--out", str(out)]) == 0
    assert len(_rows(out / "attacks.csv")) == 4


def test_defend_eval_matrix_always_has_baseline(tmp_path):
    extra = """
[defend_eval]
attacks = ["inversion"]
[[defend_eval.defenses]]
name = "censor"
trials = 2
[[defend_eval.defenses]]
name = "noise"
sigma = 0.5
"""
    out = tmp_path / "de"
    assert main(["defend-eval", "--config", _write(tmp_path, extra, images=2), "--out", str(out)]) == 0
    rows = _rows(out / "matrix.csv")
    assert [r["defense"] for r in rows] == ["none", "censor", "noise"]
    assert len(_rows(out / "cells_detail.csv")) == 6


def test_defend_eval_with_explicit_baseline(tmp_path):
    extra = """
[defend_eval]
attacks = ["inversion"]
[[defend_eval.defenses]]
name = "none"
[[defend_eval.defenses]]
name = "clip"
"""
    out = tmp_path / "de"
    assert main(["defend-eval", "--config", _write(tmp_path, extra, images=1), "--out", str(out)]) == 0
    assert len(_rows(out / "matrix.csv")) == 2


def test_bench_counts_and_formula(tmp_path):
    extra = "[bench]\nrepetitions = 4\ntrials = [2, 4]\nbatch_size = 4\n"
    out = tmp_path / "bench"
    assert main(["bench", "--config", _write(tmp_path, extra), "--out", str(out)]) == 0
    doc = json.loads((out / "bench.json").read_text())
    assert doc["repetitions"] == 4
    assert len(_rows(out / "bench_times.csv")) == 4 * 3
    med = doc["median_ms"]
    assert doc["overhead_percent"]["censor-T2"] == pytest.approx(
        (med["censor-T2"] - med["none"]) / med["none"] * 100)


def test_overhead_percentage():
    assert overhead_percentage(1.5, 1.0) == 50.0
    assert overhead_percentage(1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        overhead_percentage(1.0, 0.0)


def test_env_seed_is_applied(tmp_path, monkeypatch):
    monkeypatch.setenv("GSL_SEED", "7")
    out = tmp_path / "env"
    main(["train", "--config", _write(tmp_path), "--out", str(out)])
    assert json.loads((out / "run_record.json").read_text())["seed"] == 7


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("gslab")
    cmd = [exe] if exe else [sys.executable, "-m", "gslab.cli"]
    res = subprocess.run(cmd + ["train", "--config", _write(tmp_path), "--out", str(tmp_path / "s")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
