import json
import shutil

import numpy as np
import pytest

from advbreak import config as C
from advbreak.cli import build_parser, main
from advbreak.data_io import read_pnm

TINY = {
    "data.n_train": 300,
    "data.n_val": 200,
    "data.n_test": 40,
    "train.epochs": 2,
    "ae.epochs": 1,
    "ae.samples": 300,
    "preproc.epochs": 1,
    "preproc.samples": 200,
    "attack.iterations": 30,
    "attack.binary_steps": 2,
    "attack.batch_size": 2,
    "eval.instances": 5,
}


def run(*argv):
    return main([str(a) for a in argv])


def pipeline_run(out, cfg_path, workers=1):
    """Every subcommand once; returns the paths of all produced artifacts."""
    common = ["--config", cfg_path, "--out-dir", out]
    assert run("train-classifier", *common) == 0
    clf = out / "classifier.advb"
    assert run("train-ae", *common, "--count", 2, "--seed-base", 100, "--classifier", clf,
               "--pipeline-seed", 1) == 0
    assert run("train-ae", *common, "--count", 2, "--seed-base", 200, "--classifier", clf,
               "--pipeline-seed", 2) == 0
    for p in ("pipeline-100.json", "pipeline-200.json"):
        assert run("calibrate", *common, "--pipeline", out / p, "--fpr", 0.05) == 0
    assert run("train-preprocessor", *common, "--classifier", clf) == 0
    g = out / "preprocessor.advb"
    w = ["--workers", workers]
    assert run("evaluate", *common, *w, "--protocol", "whitebox", "--classifier", clf) == 0
    assert run("evaluate", *common, *w, "--protocol", "preproc", "--classifier", clf, "--preprocessor", g) == 0
    assert run("evaluate", *common, *w, "--protocol", "greybox", "--pipeline", out / "pipeline-100.json",
               "--attacker-pipeline", out / "pipeline-200.json") == 0
    assert run("attack", *common, "--kind", "fgsm", "--classifier", clf) == 0
    assert run("attack", *common, "--kind", "greybox", "--pipeline", out / "pipeline-200.json") == 0
    assert run("report", "--eval", out / "eval-whitebox.json", "--figures") == 0
    return out


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory, tiny_cfg):
    a = pipeline_run(tmp_path_factory.mktemp("run_a"), tiny_cfg)
    b = pipeline_run(tmp_path_factory.mktemp("run_b"), tiny_cfg, workers=2)
    return a, b


def artifacts(out):
    return sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file() and "data-cache" not in p.parts)


def test_pipeline_outputs_exist(two_runs):
    a, _ = two_runs
    names = {str(p) for p in artifacts(a)}
    for want in ("classifier.advb", "classifier.history.csv", "ae-100.advb", "ae-201.advb",
                 "pipeline-100.thresholds.json", "pipeline-100.thresholds.csv", "preprocessor.advb",
                 "eval-whitebox.json", "eval-whitebox.csv", "eval-whitebox.adv.idx", "eval-greybox.json",
                 "eval-preproc.json", "attack-fgsm.json", "attack-greybox.json", "eval-whitebox.summary.md",
                 "eval-whitebox.grid.pgm"):
        assert want in names, want


def test_rerun_is_byte_identical(two_runs):
    a, b = two_runs
    assert artifacts(a) == artifacts(b)
    for rel in artifacts(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_report_contents(two_runs):
    a, _ = two_runs
    doc = json.loads((a / "eval-greybox.json").read_text())
    assert doc["protocol"] == "greybox" and len(doc["records"]) == 5
    assert doc["config"]["defender"]["detectors"] == 2 and doc["config"]["defender"]["fpr"] == 0.05
    csv_rows = (a / "eval-greybox.csv").read_text().splitlines()
    assert len(csv_rows) == 6 and csv_rows[0].startswith("index,label,target,success")
    fg = json.loads((a / "attack-fgsm.json").read_text())
    assert fg["config"]["success"] == "untargeted"
    grid = read_pnm(a / "eval-whitebox.grid.pgm")
    assert grid.shape == (28, 5 * 28 + 4, 1)


def test_history_and_threshold_files(two_runs):
    a, _ = two_runs
    t = json.loads((a / "pipeline-100.thresholds.json").read_text())
    assert t["fpr"] == 0.05 and t["budget"] == "per_detector" and len(t["rows"]) == 2
    assert all(r["empirical_fpr"] <= 0.05 for r in t["rows"])
    assert (a / "classifier.history.csv").read_text().splitlines()[0] == "epoch,train_loss,val_accuracy"


def test_defaults_command_prints_every_key(capsys):
    assert run("defaults") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == json.loads(json.dumps(C.DEFAULTS))
    assert doc["attack.kappa"] == 0.0 and doc["greybox.defender_fpr"] == 0.001


def test_help_lists_defaults_for_every_subcommand():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        flags = [a for a in p._actions if a.dest != "help"]
        text = " ".join(p.format_help().split())
        assert text.count("(default:") == len(flags), name


def err_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert lines and lines[-1].startswith("advbreak: error[")
    return lines[-1]


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train.learning_rate": 0.1}))
    assert run("train-classifier", "--config", cfg, "--out-dir", tmp_path) == 2
    assert "unknown config key 'train.learning_rate'" in err_line(capsys)
    assert run("train-classifier", "--set", "train.lr=fast", "--out-dir", tmp_path) == 2
    assert "error[config]" in err_line(capsys)


def test_missing_artifact_exits_3(tmp_path, capsys):
    assert run("evaluate", "--protocol", "whitebox", "--classifier", tmp_path / "nope.advb",
               "--out-dir", tmp_path, "--set", "data.n_train=10", "--set", "data.n_val=10",
               "--set", "data.n_test=5") == 3
    assert "error[missing_artifact]" in err_line(capsys)
    assert run("train-classifier", "--config", tmp_path / "absent.json") == 3


def test_uncalibrated_pipeline_exits_4(two_runs, tmp_path, capsys):
    a, _ = two_runs
    for f in ("classifier.advb", "ae-100.advb", "ae-101.advb", "pipeline-100.json"):
        shutil.copy(a / f, tmp_path / f)
    code = run("attack", "--kind", "greybox", "--pipeline", tmp_path / "pipeline-100.json",
               "--out-dir", tmp_path, "--set", "data.n_train=10", "--set", "data.n_val=10", "--set", "data.n_test=5")
    assert code == 4
    assert "error[uncalibrated]" in err_line(capsys)


def test_report_on_empty_file_fails_without_output(tmp_path, capsys):
    empty = tmp_path / "eval.json"
    empty.write_text("")
    before = set(tmp_path.iterdir())
    assert run("report", "--eval", empty, "--figures") != 0
    assert set(tmp_path.iterdir()) == before
    assert "error[bad_report]" in err_line(capsys)


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ENV, str(tmp_path / "envout"))
    assert C.output_dir(C.load_config()) == tmp_path / "envout"
    assert C.output_dir(C.load_config(overrides={"output.dir": "x"})) == C.output_dir({"output.dir": "x"})


def test_config_precedence_and_types(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.lr": 0.01, "attack.kappa": 1}))
    got = C.load_config(cfg, {"train.lr": 0.5})
    assert got["train.lr"] == 0.5 and got["attack.kappa"] == 1.0
    with pytest.raises(C.ConfigError):
        C.load_config(overrides={"eval.instances": 1.5})
    with pytest.raises(C.ConfigError):
        C.load_config(overrides={"attack.abort_early": 1})
    with pytest.raises(C.ConfigError):
        C.attack_config(C.load_config(overrides={"attack.c_lo": 5.0, "attack.c_hi": 1.0}))
    assert C.parse_assignment("attack.kappa=1") == ("attack.kappa", 1)
    assert C.parse_assignment("train.optimizer=sgd") == ("train.optimizer", "sgd")


def test_whitebox_on_desk_classifier_succeeds_everywhere(unsecured, tmp_path):
    from advbreak.data_io import save_model

    clf = save_model(unsecured, tmp_path / "unsecured.advb")
    code = run("evaluate", "--protocol", "whitebox", "--classifier", clf, "--out-dir", tmp_path,
               "--set", "data.n_train=50", "--set", "data.n_val=50", "--set", "data.n_test=20",
               "--set", "eval.instances=10")
    assert code == 0
    doc = json.loads((tmp_path / "eval-whitebox.json").read_text())
    assert doc["aggregates"]["success_rate"] == 1.0
    assert np.isclose(doc["aggregates"]["mean_distortion"],
                      np.mean([r["distortion"] for r in doc["records"] if r["success"]]))
