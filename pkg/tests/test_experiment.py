import csv
import io

import numpy as np
import pytest

from blocksvm.cli import main
from blocksvm.experiment import (
    ExperimentConfig,
    ExperimentError,
    Report,
    ReportRow,
    emit_report,
    render_csv,
    render_text,
    run_protocol,
    verify_invariants,
)
from blocksvm.keymat import SecretKey
from blocksvm.svm import load_model

KEY_HEX = "000102030405060708090a0b0c0d0e0f"
KEY = SecretKey.from_hex(KEY_HEX)
SMALL = dict(synth_classes=4, train_per_class=8, test_per_class=4, synth_height=10, synth_width=10)


def table1_report():
    return Report(
        rows=[ReportRow("proposed(M=2)", 0.9757, 0.0283), ReportRow("proposed(M=5)", 0.9757, 0.0303)],
        baseline=0.9757,
    )


def test_config_text_round_trip():
    cfg = ExperimentConfig(dataset="/data/yale", image_size=(50, 50), block_sizes=(2, 5), kernel="poly", gamma=1e-3)
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.fingerprint() == cfg.fingerprint()


def test_config_parsing_errors():
    with pytest.raises(ExperimentError, match="unknown setting"):
        ExperimentConfig.from_text("colour = blue\n")
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_text("just words\n")
    with pytest.raises(ExperimentError):
        ExperimentConfig(no_key_normalization="guess")
    cfg = ExperimentConfig.from_text("# comment\nC = 2.5  # trailing\nsteps = block_permutation, zscore\n")
    assert cfg.C == 2.5 and cfg.steps == ("block_permutation", "zscore")


def test_report_shape_mirrors_tables():
    text = render_text(table1_report()).splitlines()
    assert text[-1].split() == ["baseline", "0.9757", "0.9757"]
    rows = list(csv.reader(io.StringIO(render_csv(table1_report()))))
    assert rows[0] == ["transform", "with_key", "without_key"]
    assert len(rows) == 4 and rows[-1][0] == "baseline"


def test_empty_report_is_header_only():
    assert render_csv(Report()) == "transform,with_key,without_key\r\n"


def test_text_and_csv_agree():
    report = table1_report()
    text_rows = [line.split() for line in render_text(report).splitlines() if not line.startswith("#")][1:]
    csv_rows = list(csv.reader(io.StringIO(render_csv(report))))[1:]
    assert [r[-2:] for r in text_rows] == [r[1:] for r in csv_rows]


def test_emit_report_errors(tmp_path):
    with pytest.raises(ExperimentError):
        emit_report(table1_report(), tmp_path / "r.txt", "xml")
    with pytest.raises(ExperimentError):
        emit_report(table1_report(), tmp_path / "missing" / "r.txt")


@pytest.mark.parametrize("kernel,gamma", [("rbf", 1e-4), ("poly", 1e-3)])
def test_protocol_small(kernel, gamma):
    report = run_protocol(ExperimentConfig(kernel=kernel, gamma=gamma, **SMALL), KEY)
    truth = report.test_labels
    for row in report.rows:
        assert row.identical_to_baseline
        name = row.transform
        # independent counting pass
        correct = sum(int(p == t) for p, t in zip(report.predictions[f"{name}/with_key"], truth))
        assert row.with_key == correct / len(truth)
        assert 0.0 <= row.without_key <= 1.0
    assert [r.transform for r in report.rows] == ["proposed(M=2)", "proposed(M=5)"]


def test_protocol_raw_variants():
    cfg = ExperimentConfig(no_key_normalization="raw", baseline_normalization="raw", block_sizes=(5,), **SMALL)
    report = run_protocol(cfg, KEY)
    assert len(report.rows) == 1 and 0.0 <= report.baseline <= 1.0


def test_verify_default_passes():
    results = verify_invariants(pairs=40, dataset_size=30)
    assert all(r.passed for r in results), [r for r in results if not r.passed]
    flip_ip = next(r for r in results if r.name.startswith("inner product changed"))
    assert flip_ip.deviation >= 0.95


def test_verify_fault_injection_breaks_flip_distance():
    results = {r.name: r for r in verify_invariants(pairs=20, dataset_size=30, fault_injection=True)}
    assert not results["distance conservation (bit flip)"].passed
    assert results["distance conservation (permutation + shuffle)"].passed


# -- CLI ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--classes", "3", "--per-class", "6", "--height", "10", "--width", "10",
                 "--seed", "2", "--output", str(base / "train")]) == 0
    assert main(["gen-synth", "--classes", "3", "--per-class", "6", "--height", "10", "--width", "10",
                 "--seed", "2", "--output", str(base / "test")]) == 0
    return base


def test_cli_train_and_eval(synth_dirs, capsys):
    model_path = synth_dirs / "m.bsvm"
    assert main(["train", "--key", KEY_HEX, "--block-size", "5", "--kernel", "rbf", "--gamma", "1e-3",
                 "--train-dir", str(synth_dirs / "train"), "--model-out", str(model_path)]) == 0
    model = load_model(model_path)
    assert model.classes == ["class000", "class001", "class002"]
    assert model.transform["block_size"] == 5

    capsys.readouterr()
    assert main(["eval", "--model", str(model_path), "--test-dir", str(synth_dirs / "test"), "--key", KEY_HEX,
                 "--predictions-out", str(synth_dirs / "p.txt")]) == 0
    assert "accuracy (with key): 1.0000" in capsys.readouterr().out
    assert len((synth_dirs / "p.txt").read_text().split()) == 18

    assert main(["eval", "--model", str(model_path), "--test-dir", str(synth_dirs / "test"),
                 "--train-dir", str(synth_dirs / "train")]) == 0
    assert "without key" in capsys.readouterr().out
    assert main(["eval", "--model", str(model_path), "--test-dir", str(synth_dirs / "test"),
                 "--no-key-normalization", "raw"]) == 0


def test_cli_eval_without_stats_source_fails(synth_dirs, capsys, monkeypatch):
    monkeypatch.delenv("BLOCKSVM_KEY", raising=False)
    model_path = synth_dirs / "m2.bsvm"
    main(["train", "--key", KEY_HEX, "--block-size", "2", "--train-dir", str(synth_dirs / "train"),
          "--model-out", str(model_path)])
    assert main(["eval", "--model", str(model_path), "--test-dir", str(synth_dirs / "test")]) == 1
    assert "baseline-stats" in capsys.readouterr().err


def test_cli_transform_with_stats(synth_dirs):
    out, stats = synth_dirs / "t.btd", synth_dirs / "t.bns"
    assert main(["transform", "--key", KEY_HEX, "--block-size", "2", "--input", str(synth_dirs / "train"),
                 "--output", str(out), "--save-stats", str(stats)]) == 0
    assert main(["transform", "--key", KEY_HEX, "--block-size", "2", "--input", str(synth_dirs / "test"),
                 "--output", str(synth_dirs / "u.btd"), "--stats", str(stats)]) == 0
    assert out.read_bytes()[:4] == b"BTDS" and stats.read_bytes()[:4] == b"BNST"


def test_cli_missing_key(synth_dirs, monkeypatch, capsys):
    monkeypatch.delenv("BLOCKSVM_KEY", raising=False)
    assert main(["experiment", "--dataset", "synth"]) == 1
    assert "key is required" in capsys.readouterr().err
    assert main(["transform", "--key", "abcd", "--input", str(synth_dirs / "train"),
                 "--output", str(synth_dirs / "x.btd")]) == 1


def test_cli_experiment_from_config(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BLOCKSVM_KEY", KEY_HEX)
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(ExperimentConfig(**SMALL).to_text())
    assert main(["experiment", "--config", str(cfg), "--report", str(tmp_path / "r.txt"),
                 "--csv", str(tmp_path / "r.csv"), "--save-config", str(tmp_path / "eff.cfg")]) == 0
    assert "proposed(M=5)" in capsys.readouterr().out
    assert (tmp_path / "r.csv").read_text().startswith("transform,with_key,without_key")
    assert ExperimentConfig.from_text((tmp_path / "eff.cfg").read_text()) == ExperimentConfig(**SMALL)


def test_cli_verify_exit_codes(capsys):
    assert main(["verify", "--pairs", "10"]) == 0
    assert main(["verify", "--pairs", "10", "--fault-injection"]) == 1
    assert "FAIL  distance conservation (bit flip)" in capsys.readouterr().out


def test_parallel_runs_match_sequential():
    cfg = ExperimentConfig(**SMALL)
    seq, par = run_protocol(cfg, KEY), run_protocol(cfg, KEY, jobs=2)
    assert render_csv(seq) == render_csv(par)
    for name in seq.predictions:
        assert np.array_equal(seq.predictions[name], par.predictions[name])
