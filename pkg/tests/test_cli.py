import json
import subprocess
import sys
from pathlib import Path

import pytest

from patchtts.cli import main

TINY_MODEL = {
    "d_model": 32, "n_heads": 2, "n_layers_enc": 1, "n_layers_global": 1,
    "n_layers_local": 1, "d_ff": 64, "max_frames": 16,
}


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture
def tiny_config(tmp_path):
    cfg = {
        "data": {"n_utts": 40, "n_speakers": 2, "lexicon_size": 8, "word_len_max": 3},
        "model": TINY_MODEL,
        "train": {"steps": 25, "warmup_steps": 5, "batch_size": 4},
        "finetune": {"steps": 5, "batch_pairs": 2},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def pipeline(tmp_path, tiny_config):
    data = tmp_path / "data"
    run = tmp_path / "run"
    assert run_cli("gen-data", "--out", str(data), "--seed", "3",
                   "--config", str(tiny_config)) == 0
    assert run_cli("train", "--data", str(data / "dataset.jsonl"), "--out", str(run),
                   "--seed", "3", "--config", str(tiny_config)) == 0
    return data, run, tiny_config


def test_gen_data_writes_manifest_and_run_manifest(tmp_path, tiny_config):
    out = tmp_path / "d"
    assert run_cli("gen-data", "--out", str(out), "--seed", "1",
                   "--config", str(tiny_config)) == 0
    lines = (out / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 40
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["config"]["data"]["n_utts"] == 40
    assert manifest["version"].startswith("patchtts-")


def test_gen_data_same_seed_byte_identical(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("gen-data", "--out", str(out), "--seed", "9",
                       "--config", str(tiny_config)) == 0
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()


def test_refuses_overwrite_without_force(tmp_path, tiny_config, capsys):
    out = tmp_path / "d"
    assert run_cli("gen-data", "--out", str(out), "--seed", "1",
                   "--config", str(tiny_config)) == 0
    assert run_cli("gen-data", "--out", str(out), "--seed", "1",
                   "--config", str(tiny_config)) == 2
    err = capsys.readouterr().err
    assert err.startswith("error code=outputs_exist")
    assert run_cli("gen-data", "--out", str(out), "--seed", "1",
                   "--config", str(tiny_config), "--force") == 0


def test_config_precedence_flags_over_file(tmp_path, tiny_config):
    out = tmp_path / "d"
    assert run_cli("gen-data", "--out", str(out), "--seed", "1",
                   "--config", str(tiny_config), "--n-utts", "12") == 0
    assert len((out / "dataset.jsonl").read_text().splitlines()) == 12
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["data"]["n_utts"] == 12
    assert manifest["config"]["data"]["lexicon_size"] == 8  # from file


def test_train_missing_manifest_fails(tmp_path, tiny_config, capsys):
    rc = run_cli("train", "--data", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "run"), "--config", str(tiny_config))
    assert rc == 2
    assert "missing_manifest" in capsys.readouterr().err


def test_train_writes_artifacts(pipeline):
    data, run, _ = pipeline
    assert (run / "model.ckpt").exists()
    assert (run / "bpe.vocab").exists()
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,lr,ce,flux,total"
    assert len(log) == 26
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["train"]["steps"] == 25


def test_finetune_requires_checkpoint(tmp_path, tiny_config, capsys):
    rc = run_cli("finetune", "--data", str(tmp_path / "x.jsonl"),
                 "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--out", str(tmp_path / "ft"), "--config", str(tiny_config))
    assert rc == 2
    assert "missing_checkpoint" in capsys.readouterr().err


def test_synth_deep_without_ref_transcript_fails(pipeline, capsys):
    data, run, cfg = pipeline
    rc = run_cli("synth", "--checkpoint", str(run / "model.ckpt"),
                 "--out", str(run / "synth"), "--text", "ab",
                 "--mode", "deep", "--config", str(cfg))
    assert rc == 2
    err = capsys.readouterr().err
    assert "code=config_validation" in err and "ref-transcript" in err


def test_synth_single_and_eval(pipeline):
    data, run, cfg = pipeline
    synth_dir = run / "synth"
    rc = run_cli("synth", "--checkpoint", str(run / "model.ckpt"),
                 "--out", str(synth_dir), "--data", str(data / "dataset.jsonl"),
                 "--split", "heldout", "--seed", "4", "--config", str(cfg))
    assert rc == 0
    lines = (synth_dir / "streams.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert all({"id", "l0", "l1", "l2", "used_top_p", "truncated", "frames"} <= set(r)
               for r in recs)
    eval_dir = run / "eval"
    rc = run_cli("eval", "--data", str(data / "dataset.jsonl"),
                 "--streams", str(synth_dir), "--out", str(eval_dir))
    assert rc == 0
    summary = json.loads((eval_dir / "summary.json").read_text())
    assert {"cer_mean", "wer_mean", "spk_mean", "stuck_mean", "eer", "n"} <= set(summary)
    report = (eval_dir / "report.csv").read_text().splitlines()
    assert report[0] == "style,n,wer_mean,cer_mean,spk_mean,stuck_mean"


def test_synth_single_text(pipeline):
    data, run, cfg = pipeline
    out = run / "single"
    rc = run_cli("synth", "--checkpoint", str(run / "model.ckpt"),
                 "--out", str(out), "--text", "ab", "--speaker", "0",
                 "--style", "loud", "--seed", "5", "--top-p", "0.4",
                 "--no-ras", "--config", str(cfg))
    assert rc == 0
    rec = json.loads((out / "streams.jsonl").read_text().splitlines()[0])
    assert rec["id"] == "single"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["sample"]["top_p"] == 0.4
    assert manifest["config"]["sample"]["use_ras"] is False


def test_no_quality_prefix_flag(pipeline):
    data, run, cfg = pipeline
    out = run / "noprefix"
    rc = run_cli("synth", "--checkpoint", str(run / "model.ckpt"),
                 "--out", str(out), "--text", "ab", "--no-quality-prefix",
                 "--seed", "5", "--config", str(cfg))
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["quality_prefix"] is None


def test_no_flux_flag_recorded(pipeline, tmp_path, tiny_config):
    data, run, cfg = pipeline
    out = tmp_path / "run_noflux"
    rc = run_cli("train", "--data", str(data / "dataset.jsonl"), "--out", str(out),
                 "--seed", "3", "--config", str(tiny_config), "--no-flux")
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["flux_beta"] == 0.0
    log = (out / "train_log.csv").read_text().splitlines()[1]
    assert log.split(",")[3] == "0.0"  # flux column identically zero


def test_malformed_config_fails(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = run_cli("gen-data", "--out", str(tmp_path / "d"), "--config", str(bad))
    assert rc == 2
    assert "malformed_config" in capsys.readouterr().err


def test_unknown_config_field_fails(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"bogus_field": 1}}))
    rc = run_cli("gen-data", "--out", str(tmp_path / "d"), "--config", str(bad))
    assert rc == 2
    assert "config_validation" in capsys.readouterr().err


def test_console_entry_point(tmp_path, tiny_config):
    # the installed module is runnable as a subprocess with clean exit codes
    proc = subprocess.run(
        [sys.executable, "-m", "patchtts", "gen-data", "--out",
         str(tmp_path / "d"), "--seed", "1", "--config", str(tiny_config)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run(
        [sys.executable, "-m", "patchtts", "synth", "--checkpoint",
         str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "s"), "--text", "a"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert proc.stderr.startswith("error code=missing_checkpoint")
