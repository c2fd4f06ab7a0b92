import json

import pytest

import cli
import infer
import msio
import train as training
from infer import PredictionRecord
from storage import Storage


def _error_line(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def _synth(out, *extra) -> cli.CommandOutcome:
    return cli.run(["synth", "--n", "20", "--seed", "3", "--out", str(out), *extra])


def test_synth_is_reproducible(tmp_path):
    a = _synth(tmp_path / "a")
    b = _synth(tmp_path / "b")
    assert a.exit_code == b.exit_code == 0
    assert sorted(p.name for p in a.artifacts_written) == [
        "manifest.json", "test.mgf", "train.mgf", "validation.mgf"
    ]
    for path in a.artifacts_written:
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"n_psms": 5, "missing_ratio": 0.0}}))
    out = tmp_path / "data"
    assert cli.run(["synth", "--config", str(cfg), "--n", "10", "--seed", "1", "--out", str(out)]).exit_code == 0
    manifest = msio.load_manifest(out / "manifest.json")
    assert manifest.synth.n_psms == 10
    assert manifest.synth.missing_ratio == 0.0
    assert manifest.seed == 1
    split = msio.load_dataset(out / "manifest.json")
    assert len(split.train) + len(split.validation) + len(split.test) == 10


def test_unknown_flag_is_a_usage_error(tmp_path, capsys):
    outcome = cli.run(["synth", "--bogus", "--out", str(tmp_path)])
    assert outcome.exit_code == 1
    line = _error_line(capsys)
    assert line["error"] == "UsageError" and line["exit_code"] == 1


def test_missing_subcommand_and_help(capsys):
    assert cli.run([]).exit_code == 1
    assert cli.run(["--help"]).exit_code == 0


def test_bad_config_file_exits_one(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"d": 15}}))
    outcome = cli.run(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert outcome.exit_code == 1
    assert _error_line(capsys)["error"] == "ConfigError"
    assert cli.run(["synth", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]).exit_code == 1


def test_malformed_mgf_exits_two(tmp_path, capsys):
    mgf = tmp_path / "bad.mgf"
    mgf.write_text("BEGIN IONS\nTITLE=x\nPEPMASS=abc\nCHARGE=2+\nSEQ=PEPTIDE\n100.0 1.0\nEND IONS\n")
    preds = tmp_path / "preds.tsv"
    infer.write_predictions([], Storage(tmp_path), preds.name)
    outcome = cli.run(["evaluate", "--predictions", str(preds), "--mgf", str(mgf), "--out", str(tmp_path / "r")])
    assert outcome.exit_code == 2
    line = _error_line(capsys)
    assert line["error"] == "MgfParseError" and line["exit_code"] == 2
    lenient = cli.run(
        ["evaluate", "--lenient", "--predictions", str(preds), "--mgf", str(mgf), "--out", str(tmp_path / "r")]
    )
    # nothing annotated survives the skip
    assert lenient.exit_code == 2


def test_evaluate_perfect_predictions(tmp_path):
    assert _synth(tmp_path / "data").exit_code == 0
    test_mgf = tmp_path / "data" / "test.mgf"
    truths = msio.read_mgf_file(test_mgf)
    records = [
        PredictionRecord(p.source_id, p.peptide, 1.0, [1.0] * len(p.peptide), True) for p in truths
    ]
    preds = infer.write_predictions(records, Storage(tmp_path / "pred"))
    out = tmp_path / "report"
    outcome = cli.run(
        ["analyze", "--predictions", str(preds), "--mgf", str(test_mgf), "--out", str(out),
         "--bins", "0,0.5,1", "--xlsx"]
    )
    assert outcome.exit_code == 0
    assert (out / "report.xlsx").exists()
    report = json.loads((out / "report.json").read_text())
    for key in ("aa_precision", "aa_recall", "pep_precision", "pep_recall", "pep_auc"):
        assert report[key] == 1.0
    assert len(report["per_bin"]) == 2
    assert (out / "events.jsonl").exists()


def test_train_predict_analyze_with_tiny_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": {"d": 16, "encoder_layers": 1, "decoder_layers": 1, "imputer_layers": 1,
                  "heads": 2, "ffn_width": 32, "n_queries": 8, "max_len": 20},
        "train": {"warmup_steps": 1, "val_max_psms": 2},
        "infer": {"beam_width": 2},
    }))
    assert _synth(tmp_path / "data").exit_code == 0
    trained = cli.run(["train", "--config", str(cfg), "--manifest", str(tmp_path / "data" / "manifest.json"),
                       "--out", str(tmp_path / "run"), "--epochs", "1", "--batch-size", "4"])
    assert trained.exit_code == 0
    assert {p.name for p in trained.artifacts_written} == {"best.ckpt", "last.ckpt", "metrics.jsonl"}
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["train"]["epochs"] == 1 and saved["model"]["d"] == 16

    preds = tmp_path / "pred" / "predictions.tsv"
    predicted = cli.run(["predict", "--config", str(cfg), "--checkpoint", str(tmp_path / "run" / "best.ckpt"),
                         "--mgf", str(tmp_path / "data" / "test.mgf"), "--out", str(preds)])
    assert predicted.exit_code == 0
    assert [r.source_id for r in infer.read_predictions(preds)] == [
        p.source_id for p in msio.read_mgf_file(tmp_path / "data" / "test.mgf")
    ]

    analyzed = cli.run(["analyze", "--predictions", str(preds), "--mgf", str(tmp_path / "data" / "test.mgf"),
                        "--checkpoint", str(tmp_path / "run" / "best.ckpt"), "--imputation-bins", "2",
                        "--out", str(tmp_path / "report")])
    assert analyzed.exit_code == 0
    assert (tmp_path / "report" / "report.txt").read_text().startswith("Evaluation report")


def test_train_matched_baseline(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": {"d": 16, "encoder_layers": 1, "decoder_layers": 1, "imputer_layers": 1,
                  "heads": 2, "ffn_width": 32, "n_queries": 8, "max_len": 20},
        "train": {"warmup_steps": 1, "val_max_psms": 2},
    }))
    assert _synth(tmp_path / "data").exit_code == 0
    trained = cli.run(["train", "--config", str(cfg), "--manifest", str(tmp_path / "data" / "manifest.json"),
                       "--out", str(tmp_path / "run"), "--epochs", "1", "--batch-size", "4", "--matched-baseline"])
    assert trained.exit_code == 0
    saved = json.loads((tmp_path / "run" / "config.json").read_text())["model"]
    assert saved["encoder_layers"] == 2 and saved["extra_ffn"]
    assert not saved["use_imputation"] and not saved["use_theory_ce"]
    model, payload = training.load_model(tmp_path / "run" / "best.ckpt")
    assert model.imputer is None and model.encoder.extra_ffn is not None
    assert payload["n_parameters"] > 0


def test_missing_checkpoint_exits_three(tmp_path, capsys):
    assert _synth(tmp_path / "data").exit_code == 0
    outcome = cli.run(["predict", "--checkpoint", str(tmp_path / "none.ckpt"),
                       "--mgf", str(tmp_path / "data" / "test.mgf"), "--out", str(tmp_path / "p.tsv")])
    assert outcome.exit_code == 3
    assert _error_line(capsys)["error"] == "CheckpointError"


@pytest.mark.slow
def test_desk_pipeline_reaches_useful_precision(tmp_path):
    data = tmp_path / "data"
    assert cli.run(["synth", "--n", "1000", "--missing", "0.3", "--seed", "7", "--out", str(data)]).exit_code == 0
    assert cli.run(["train", "--manifest", str(data / "manifest.json"), "--out", str(tmp_path / "run"),
                    "--seed", "7"]).exit_code == 0
    preds = tmp_path / "pred" / "predictions.tsv"
    assert cli.run(["predict", "--checkpoint", str(tmp_path / "run" / "best.ckpt"),
                    "--mgf", str(data / "test.mgf"), "--out", str(preds)]).exit_code == 0
    assert cli.run(["evaluate", "--predictions", str(preds), "--mgf", str(data / "test.mgf"),
                    "--out", str(tmp_path / "report")]).exit_code == 0
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert report["aa_precision"] > 0.5
