import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from semask.cli import main
from semask.signal import read_wav
from semask.textalign import read_archive


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("clicorpus") / "data"
    code = main(["gen-synth", "--out", str(out), "--n-utts", "6",
                 "--seed", "7", "--d-t", "16", "--vocab", "16"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("clirun") / "run"
    code = main(["train", "--manifest", str(corpus / "manifest.jsonl"),
                 "--archive", str(corpus / "archive.cmke"),
                 "--out", str(out), "--arch", "conformer", "--n-blocks", "1",
                 "--d-a", "16", "--epochs", "2", "--batch-size", "3",
                 "--avg-last-k", "2", "--max-steps", "4",
                 "--warmup", "4", "--align", "left",
                 "--cmt-layers", "1", "--cmt-heads", "2", "--cmt-ffn", "8",
                 "--seed", "5"])
    assert code == 0
    return out


def test_gen_synth_deterministic(tmp_path, capsys):
    args = ["gen-synth", "--n-utts", "4", "--seed", "3",
            "--d-t", "8", "--vocab", "8"]
    for sub in ("a", "b"):
        code, _, _ = run_cli(capsys, *args, "--out", str(tmp_path / sub))
        assert code == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_synth_outputs_parse(corpus):
    archive = read_archive(corpus / "archive.cmke")
    assert archive.d_t == 16
    records = [json.loads(l) for l in
               (corpus / "manifest.jsonl").read_text().splitlines()]
    assert len(records) == 6
    for rec in records:
        assert -15.0 <= rec["snr_db"] <= 15.0
        assert (corpus / rec["clean"]).exists()
        assert (corpus / rec["noise"]).exists()
        assert rec["id"] in archive.utterances


def test_prepare_data_builds_manifest(corpus, tmp_path, capsys):
    out = tmp_path / "prep.jsonl"
    code, stdout, _ = run_cli(capsys, "prepare-data",
                              "--clean-dir", str(corpus / "clean"),
                              "--noise-dir", str(corpus / "noise"),
                              "--out", str(out), "--snr", "random", "--seed", "1")
    assert code == 0
    records = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(records) == 6
    for rec in records:
        assert Path(rec["clean"]).exists()
        assert -15.0 <= rec["snr_db"] <= 15.0


def test_train_writes_run_artifacts(run_dir):
    assert (run_dir / "final_averaged.ckpt").exists()
    assert (run_dir / "model_config.json").exists()
    header = (run_dir / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,lr,l_mae,l_cma,total"


def test_enhance_smoke(corpus, run_dir, tmp_path, capsys):
    noisy = sorted((corpus / "clean").glob("*.wav"))[0]
    out = tmp_path / "enh.wav"
    code, _, _ = run_cli(capsys, "enhance",
                         "--checkpoint", str(run_dir / "final_averaged.ckpt"),
                         "--model-config", str(run_dir / "model_config.json"),
                         "--in", str(noisy), "--out", str(out))
    assert code == 0
    wave = read_wav(out)
    assert len(wave) == len(read_wav(noisy))


def test_evaluate_smoke(corpus, run_dir, tmp_path, capsys):
    report = tmp_path / "report.csv"
    code, stdout, _ = run_cli(capsys, "evaluate",
                              "--manifest", str(corpus / "manifest.jsonl"),
                              "--checkpoint", str(run_dir / "final_averaged.ckpt"),
                              "--model-config", str(run_dir / "model_config.json"),
                              "--metrics", "si_sdr",
                              "--report", str(report), "--seed", "7")
    assert code == 0
    assert report.exists()
    assert "si_sdr" in stdout


def test_export_attention_smoke(corpus, run_dir, tmp_path, capsys):
    utt = json.loads((corpus / "manifest.jsonl").read_text().splitlines()[0])["id"]
    code, stdout, _ = run_cli(capsys, "export-attention",
                              "--checkpoint", str(run_dir / "final_averaged.ckpt"),
                              "--model-config", str(run_dir / "model_config.json"),
                              "--archive", str(corpus / "archive.cmke"),
                              "--manifest", str(corpus / "manifest.jsonl"),
                              "--utt", utt, "--layer", "0",
                              "--cmt-layers", "1", "--cmt-heads", "2",
                              "--cmt-ffn", "8",
                              "--out-prefix", str(tmp_path / "att"))
    assert code == 0
    produced = [Path(line) for line in stdout.splitlines() if line.endswith((".csv", ".pgm"))]
    assert produced and all(p.exists() for p in produced)
    mat = np.loadtxt(next(p for p in produced if p.suffix == ".csv"), delimiter=",")
    assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-5)


def test_help_lists_subcommands_and_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for name in ("gen-synth", "prepare-data", "train", "enhance",
                 "evaluate", "export-attention"):
        assert name in out
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    out = capsys.readouterr().out
    assert "0.7" in out          # loss weight
    assert "0.001" in out        # peak learning rate
    assert "20000" in out        # warmup
    assert "130" in out          # epochs


def test_error_exits_nonzero_with_stderr(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train",
                           "--manifest", str(tmp_path / "missing.jsonl"),
                           "--out", str(tmp_path / "run"))
    assert code == 1
    assert "error:" in err


def test_bad_archive_rejected(tmp_path, capsys, corpus):
    bogus = tmp_path / "bogus.cmke"
    bogus.write_bytes(b"NOTCMKE" + b"\x00" * 64)
    code, _, err = run_cli(capsys, "train",
                           "--manifest", str(corpus / "manifest.jsonl"),
                           "--archive", str(bogus),
                           "--out", str(tmp_path / "run"))
    assert code == 1
    assert "error:" in err


def test_config_file_precedence(corpus, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"alpha": 0.5, "epochs": 1, "batch-size": 3,
                               "d-a": 16, "n-blocks": 1, "max-steps": 2,
                               "cmt-layers": 1, "cmt-heads": 2, "cmt-ffn": 8,
                               "warmup": 2, "avg-last-k": 1}))
    code, stdout, _ = run_cli(capsys, "train",
                              "--manifest", str(corpus / "manifest.jsonl"),
                              "--archive", str(corpus / "archive.cmke"),
                              "--out", str(tmp_path / "run"),
                              "--config", str(cfg),
                              "--alpha", "0.9")      # flag beats config file
    assert code == 0
    resolved = json.loads(stdout.splitlines()[0])
    assert resolved["alpha"] == 0.9                  # flag wins
    assert resolved["epochs"] == 1                   # config beats default
    assert resolved["warmup"] == 2


def test_unknown_config_key_rejected(corpus, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning-rate-schedule": "cosine"}))
    code, _, err = run_cli(capsys, "train",
                           "--manifest", str(corpus / "manifest.jsonl"),
                           "--out", str(tmp_path / "run"),
                           "--config", str(cfg))
    assert code == 1
    assert "unknown config key" in err
