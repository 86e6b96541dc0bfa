import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from madnn import cli
from madnn.config import expand_sweep, load_config
from madnn.dataset import load_dataset

TINY = {
    "seed": 3,
    "scenario": {"num_mas": 2, "region_size_m": [0.075, 0.025]},
    "data": {"num_samples": 60, "val_fraction": 0.2},
    "model": {"feedback_bits": 4, "encoder_hidden": [8], "trunk_channels": [4, 4, 4], "trunk_features": 8,
              "position_hidden": 8, "precoder_hidden": 8},
    "train": {"epochs": 2, "batch_size": 16},
    "baseline": {"limit": 3, "prior_samples": 16},
}


def _cfg(tmp_path, name="c.yaml", **updates):
    d = json.loads(json.dumps(TINY))
    d["output_dir"] = str(tmp_path / "run")
    for k, v in updates.items():
        d[k] = v
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return p


def _json_lines(out):
    return [json.loads(line) for line in out.strip().splitlines() if line.startswith("{")]


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("MADNN_SEED", raising=False)
    monkeypatch.delenv("MADNN_OUTPUT_DIR", raising=False)


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert cli.main(["gen-data", str(tmp_path / "nope.yaml")]) == cli.EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_no_arguments_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == cli.EXIT_USAGE


def test_unknown_key_rejected(tmp_path, capsys):
    p = _cfg(tmp_path, scenario={"num_mas": 2, "antennas": 3})
    assert cli.main(["gen-data", str(p)]) == cli.EXIT_USAGE
    assert "antennas" in capsys.readouterr().err


def test_gen_data_header_and_seed_override(tmp_path, capsys):
    p = _cfg(tmp_path)
    assert cli.main(["gen-data", str(p)]) == 0
    f = tmp_path / "run" / "data.bin"
    ds = load_dataset(f)
    assert len(ds) == 60 and ds.header.seed == 3 and ds.header.dims == (8, 2, 2)
    h1 = hashlib.sha256(f.read_bytes()).hexdigest()
    assert cli.main(["gen-data", str(p), "--seed", "4", "--output-dir", str(tmp_path / "s4")]) == 0
    h2 = hashlib.sha256((tmp_path / "s4" / "data.bin").read_bytes()).hexdigest()
    assert cli.main(["gen-data", str(p), "--seed", "4", "--output-dir", str(tmp_path / "s4b")]) == 0
    h3 = hashlib.sha256((tmp_path / "s4b" / "data.bin").read_bytes()).hexdigest()
    assert h1 != h2 and h2 == h3
    resolved = yaml.safe_load((tmp_path / "s4" / "config.resolved.yaml").read_text())
    assert resolved["seed"] == 4 and resolved["scenario"]["wavelength_m"] == 0.1


def test_env_overrides(tmp_path, monkeypatch, capsys):
    p = _cfg(tmp_path)
    monkeypatch.setenv("MADNN_SEED", "9")
    monkeypatch.setenv("MADNN_OUTPUT_DIR", str(tmp_path / "env"))
    assert cli.main(["gen-data", str(p)]) == 0
    assert load_dataset(tmp_path / "env" / "data.bin").header.seed == 9
    monkeypatch.setenv("MADNN_SEED", "nine")
    assert cli.main(["gen-data", str(p)]) == cli.EXIT_USAGE


def test_train_without_data_is_data_error(tmp_path, capsys):
    assert cli.main(["train", str(_cfg(tmp_path)), "--quiet"]) == cli.EXIT_DATA


@pytest.fixture
def trained_run(tmp_path, capsys):
    p = _cfg(tmp_path)
    assert cli.main(["gen-data", str(p)]) == 0
    assert cli.main(["train", str(p), "--quiet"]) == 0
    summary = _json_lines(capsys.readouterr().out)[-1]
    return p, tmp_path / "run", summary


def test_train_outputs(trained_run):
    _, out, summary = trained_run
    assert summary["epochs"] == 2
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "mode", "train_loss", "train_rate", "val_rate", "spacing_violation_frac",
                             "omega", "eta", "best_val_rate"]
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()


def test_train_resume_continues_numbering(trained_run, capsys):
    p, out, _ = trained_run
    assert cli.main(["train", str(p), "--quiet", "--resume", "--epochs", "4"]) == 0
    with open(out / "metrics.csv") as fh:
        assert [int(r["epoch"]) for r in csv.DictReader(fh)] == [0, 1, 2, 3]


def test_eval_reproduces_best_rate(trained_run, capsys):
    _, out, summary = trained_run
    assert cli.main(["eval", str(out / "best.ckpt"), str(out / "data.bin")]) == 0
    res = _json_lines(capsys.readouterr().out)[-1]
    assert abs(res["mean_sum_rate"] - summary["best_val_rate"]) < 1e-9
    with open(res["csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    for r in rows:
        assert abs(float(r["rate_u0"]) + float(r["rate_u1"]) - float(r["sum_rate"])) < 1e-9
        assert len(r["bits"]) == 8 and r["ablation"] == "none"


def test_eval_ablation_flag_reported(trained_run, capsys):
    _, out, _ = trained_run
    assert cli.main(["eval", str(out / "best.ckpt"), str(out / "data.bin"), "--ablation", "random-bits",
                     "--feasibility"]) == 0
    res = _json_lines(capsys.readouterr().out)[-1]
    assert res["ablation"] == "random-bits" and res["spacing_violation_frac"] == 0.0
    with open(res["csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"learned+random-bits"}


def test_eval_errors(trained_run, tmp_path, capsys):
    _, out, _ = trained_run
    assert cli.main(["eval", str(tmp_path / "none.ckpt"), str(out / "data.bin")]) == cli.EXIT_DATA
    (tmp_path / "junk.bin").write_bytes(b"xxxx")
    assert cli.main(["eval", str(out / "best.ckpt"), str(tmp_path / "junk.bin")]) == cli.EXIT_DATA


def test_baseline_zf_perfect_and_schema(trained_run, capsys):
    p, out, _ = trained_run
    assert cli.main(["baseline", "zf-perfect", str(p)]) == 0
    with open(out / "baseline_zf-perfect.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(float(r["interference"]) < 1e-8 for r in rows)
    assert cli.main(["eval", str(out / "best.ckpt"), str(out / "data.bin"), "--out", str(out / "learned.csv")]) == 0
    with open(out / "learned.csv") as fh:
        learned = list(csv.DictReader(fh))
    assert list(rows[0]) == list(learned[0])


def test_baseline_unknown_method(tmp_path, capsys):
    assert cli.main(["baseline", "oracle-magic", str(_cfg(tmp_path))]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "fixed-zf" in err and "as-zf" in err


def _write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "sweep_variable", "sweep_value", "sample", "sum_rate"])
        w.writeheader()
        w.writerows(rows)


def test_report_merge_and_average(tmp_path, capsys):
    _write_report(tmp_path / "a.csv", [
        {"method": "learned", "sweep_variable": "feedback_bits", "sweep_value": 4, "sample": 0, "sum_rate": 2.0},
        {"method": "learned", "sweep_variable": "feedback_bits", "sweep_value": 4, "sample": 1, "sum_rate": 4.0}])
    _write_report(tmp_path / "b.csv", [
        {"method": "fixed-zf", "sweep_variable": "feedback_bits", "sweep_value": 4, "sample": 0, "sum_rate": 1.5},
        {"method": "learned", "sweep_variable": "feedback_bits", "sweep_value": 4, "sample": 2, "sum_rate": 6.0}])
    out = tmp_path / "merged.csv"
    assert cli.main(["report", str(tmp_path / "*.csv"), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = {r["method"]: r for r in csv.DictReader(fh)}
    assert float(rows["learned"]["mean_sum_rate"]) == 4.0 and rows["learned"]["count"] == "3"
    assert float(rows["fixed-zf"]["mean_sum_rate"]) == 1.5 and rows["fixed-zf"]["count"] == "1"


def test_report_empty_glob(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "*.csv"), "--out", str(tmp_path / "m.csv")]) == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, capsys):
    p = _cfg(tmp_path, train={"epochs": 1, "batch_size": 16, "lr": 1e300})
    assert cli.main(["gen-data", str(p)]) == 0
    assert cli.main(["train", str(p), "--quiet"]) == cli.EXIT_NUMERIC


def test_sweep_expansion(tmp_path):
    p = _cfg(tmp_path, sweep={"variable": "region_size_m", "values": [0.075, [0.1, 0.05]]})
    cfg = load_config(p)
    pts = expand_sweep(cfg)
    assert [pt.scenario.region_size_m for _, _, pt in pts] == [(0.075, 0.025), (0.1, 0.05)]
    assert pts[0][2].output_dir.endswith("region_size_m=0.075")
    p = _cfg(tmp_path, "paths.yaml", sweep={"variable": "paths", "values": [1, 2]})
    pts = expand_sweep(load_config(p))
    assert [(pt.scenario.tx_paths, pt.scenario.rx_paths) for _, _, pt in pts] == [(1, 1), (2, 2)]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "madnn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout


def test_shipped_configs_validate():
    from pathlib import Path

    from madnn.config import expand_sweep, load_config
    files = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert files
    for f in files:
        for _, _, cfg in expand_sweep(load_config(f)):
            cfg.build_scenario()
            cfg.build_model_config()
            cfg.build_train_config()
