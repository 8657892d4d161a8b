import json
import subprocess
import sys

import yaml

from stratum import cli, harness


def small_config(tmp_path, **data):
    doc = {
        "data": {"alpha": 0.05, "n_train": 1500, "n_val": 400, "n_test": 1500, **data},
        "erm": {"epochs": 3},
        "gdro": {"epochs": 3},
        "cluster": {"k_range": [2, 3]},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_unknown_flag_exits_nonzero_with_usage(capsys):
    assert cli.main(["george", "--bogus"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error(capsys):
    assert cli.main([]) == 2


def test_bad_config_reports_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trials: 1\ncolour: red\n")
    assert cli.main(["george", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    assert "colour" in capsys.readouterr().err


def test_console_script_module_runs():
    proc = subprocess.run([sys.executable, "-m", "stratum.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "george" in proc.stdout


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "synth"
    assert cli.main(["synth", "--alpha", "0.1", "--n", "200", "--out", str(out)]) == 0
    data = harness.load_dataset(out / "data.csv")
    assert data.n == 200 and data.has_z
    assert (out / "spec.json").exists() and (out / "config.echo").exists()


def test_synth_f32bin_without_z(tmp_path):
    out = tmp_path / "synth"
    assert cli.main(["synth", "--source", "lemma1", "--d", "2", "--n", "100", "--format",
                     "f32bin", "--no-z", "--out", str(out)]) == 0
    data = harness.load_dataset(out / "data.f32bin", "f32bin")
    assert data.d == 2 and not data.has_z


def test_lemma1_small_run(tmp_path, capsys):
    out = tmp_path / "lemma1"
    assert cli.main(["lemma1", "--d", "2", "--trials", "2", "--n-grid", "200,400",
                     "--out", str(out)]) == 0
    assert (out / "lemma1.csv").read_text().startswith("n,trial,max_gap")
    summary = json.loads((out / "summary.json").read_text())
    assert isinstance(summary["slope"], float)
    assert "log-log slope" in capsys.readouterr().out


def test_example1_small_run(tmp_path, capsys):
    out = tmp_path / "ex1"
    assert cli.main(["example1", "--alpha", "0.1,0.05", "--n", "1000", "--out", str(out)]) == 0
    assert len((out / "example1.csv").read_text().splitlines()) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["alpha"]) == {"0.1", "0.05"}
    assert "GDRO robust" in capsys.readouterr().out


def test_george_aggregate_has_confidence_fields(tmp_path):
    out = tmp_path / "george"
    assert cli.main(["george", "--config", small_config(tmp_path), "--trials", "2",
                     "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    entry = summary["metrics"]["george"]["test"]["cluster"]["robust"]
    assert {"mean", "ci95", "lower", "upper", "n"} <= set(entry)
    assert entry["n"] == 2


def test_cluster_then_gdro_reuses_clustering(tmp_path):
    cfg = small_config(tmp_path)
    assert cli.main(["cluster", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "trial_000" / "clusters_train.csv").exists()
    assert cli.main(["gdro", "--config", cfg, "--clusters", str(tmp_path / "c"),
                     "--out", str(tmp_path / "g")]) == 0
    full = harness.run_george(harness.load_config(cfg))
    reused = json.loads((tmp_path / "g" / "summary.json").read_text())
    assert reused["metrics"]["george"] == full.summary["metrics"]["george"]


def test_baselines_and_eval(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "b"
    assert cli.main(["baselines", "--config", cfg, "--kinds", "erm,superclass_gdro",
                     "--out", str(out)]) == 0
    assert cli.main(["eval", "--run", str(out)]) == 0
    assert "identical" in capsys.readouterr().out
    assert (out / "eval" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_unknown_baseline_kind(tmp_path, capsys):
    assert cli.main(["baselines", "--kinds", "erm,magic", "--out", str(tmp_path / "b")]) == 2
    assert "magic" in capsys.readouterr().err


def test_file_source_from_synth(tmp_path):
    assert cli.main(["synth", "--alpha", "0.05", "--n", "2000", "--out", str(tmp_path / "s")]) == 0
    cfg = tmp_path / "files.yaml"
    cfg.write_text(yaml.safe_dump({
        "data": {"source": "files", "path": str(tmp_path / "s" / "data.csv")},
        "erm": {"epochs": 3}, "gdro": {"epochs": 3}, "cluster": {"k_range": [2, 3]}}))
    assert cli.main(["george", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["completed_trials"] == [0]
