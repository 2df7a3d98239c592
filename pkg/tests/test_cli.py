import json
import subprocess
import sys

import pytest
import yaml

from lrlf.cli import main
from lrlf.pipeline import RunRecord
from lrlf.subword import Vocab

TINY_SETTINGS = {
    "model_overrides": {"d_model": 16, "heads": 2, "ffn_dim": 32, "layers": 1, "max_len": 48},
    "scale": 0.0002,
    "train_overrides": {"max_lr": 1e-3, "batch_tokens": 128},
    "pack_tokens": 32,
    "beam_size": 2,
    "valid_bleu_max": 4,
}


def run_cli(*argv):
    return subprocess.run([sys.executable, "-m", "lrlf", *argv], capture_output=True)


def test_unknown_subcommand_is_usage_error():
    res = run_cli("bogus")
    assert res.returncode == 2


def test_missing_required_argument():
    assert run_cli("score", "--hyp", "x").returncode == 2


def test_repair_zwj_roundtrip():
    text = "\u0dc1\u0dca \u0dbb\u0dd3 \u0dbd\u0d82\u0d9a\u0dcf\u0dc0\nplain text\n".encode("utf-8") + b"\xff bad bytes kept\n"
    res = subprocess.run([sys.executable, "-m", "lrlf", "repair-zwj"], input=text, capture_output=True)
    assert res.returncode == 0
    assert res.stdout == text.replace("\u0dca \u0dbb".encode(), "\u0dca\u200d\u0dbb".encode())


def test_score_identity(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("a b c d e\nf g h i\n")
    assert main(["score", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "h.txt")]) == 0
    assert capsys.readouterr().out.startswith("BLEU = 100.00")


def test_score_json(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("the cat sat on mat\n")
    (tmp_path / "r.txt").write_text("the cat sat on the mat\n")
    main(["score", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt"), "--json"])
    rep = json.loads(capsys.readouterr().out)
    assert rep["matches"] == [5, 3, 2, 1]
    assert rep["bleu"] == pytest.approx(57.893, abs=1e-3)


def test_score_length_mismatch(tmp_path, capsys):
    (tmp_path / "h.txt").write_text("a\nb\n")
    (tmp_path / "r.txt").write_text("a\n")
    assert main(["score", "--hyp", str(tmp_path / "h.txt"), "--ref", str(tmp_path / "r.txt")]) == 1
    assert capsys.readouterr().err.startswith("error: eval:")


def test_bad_manifest_reports_category(tmp_path, capsys):
    assert main(["prepare", "--manifest", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error: manifest:")


def test_pipeline_list_and_plan(capsys):
    assert main(["pipeline", "list"]) == 0
    assert "biCPT,3-B-FT" in capsys.readouterr().out.splitlines()
    assert main(["pipeline", "plan", "biCPT,3-B-FT", "--languages", "si,ta,en", "--direction", "si->ta"]) == 0
    assert capsys.readouterr().out.splitlines() == [
        "1. CPT[A(ii)] langs=si,ta",
        "2. FT[Bilingual] si->ta domain=out",
        "3. FT[Bilingual] si->ta domain=mixed",
        "4. FT[Bilingual] si->ta domain=in",
    ]


def test_train_vocab_and_make_denoise(small_manifest_path, tmp_path, capsys):
    vocab = tmp_path / "v.txt"
    assert main(["train-vocab", "--manifest", str(small_manifest_path), "--size", "320", "--out", str(vocab)]) == 0
    v = Vocab.load(vocab)
    assert len(v) == 320 and v.languages == ["xa", "xb", "xc"]
    mono = small_manifest_path.parent / "mono" / "xa.in.txt"
    args = ["make-denoise", "--vocab", str(vocab), "--input", str(mono), "--lang", "xa", "--pack-tokens", "32", "--dump"]
    capsys.readouterr()
    assert main(args + ["--seed", "4"]) == 0
    first = capsys.readouterr().out
    assert main(args + ["--seed", "4"]) == 0
    assert capsys.readouterr().out == first
    row = first.splitlines()[0].split("\t")
    enc, dec, lab = ([int(x) for x in col.split()] for col in row)
    assert enc[-1] == v.lid("xa") and dec[0] == v.lid("xa") and lab[-1] == v.eos_id
    assert dec[1:] == lab[:-1]


def test_prepare_writes_clean_copies(small_manifest_path, tmp_path):
    out = tmp_path / "prep"
    assert main(["prepare", "--manifest", str(small_manifest_path), "--out", str(out)]) == 0
    assert (out / "config.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary


@pytest.fixture(scope="module")
def pipeline_run(small_manifest_path, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    cfg = root / "settings.yaml"
    cfg.write_text(yaml.safe_dump(TINY_SETTINGS))
    runs = root / "runs"
    for recipe, dirname in (("B-FT", "bft"), ("biCPT,3-B-FT", "bicpt-3bft")):
        code = main([
            "pipeline", "run", recipe, "--manifest", str(small_manifest_path), "--out", str(runs / dirname),
            "--vocab-size", "320", "--config", str(cfg), "--direction", "xa->xb", "--seed", "3",
        ])
        assert code == 0
    return runs


def test_pipeline_run_creates_four_stages(pipeline_run):
    run = pipeline_run / "bicpt-3bft"
    stages = sorted(p.name for p in (run / "stages").iterdir())
    assert len(stages) == 4
    assert stages[0].startswith("01-cpt")
    assert all((run / "stages" / s / "stage.json").exists() for s in stages)
    rec = RunRecord.load(run)
    assert rec.status == "complete" and set(rec.test_bleu) == {"xa->xb"}
    frozen = json.loads((run / "config.json").read_text())
    assert frozen["settings"]["seed"] == 3 and frozen["directions"] == [["xa", "xb"]]


def test_pipeline_rerun_from_frozen_config(pipeline_run, capsys):
    run = pipeline_run / "bft"
    before = (run / "run_record.json").read_text()
    assert main(["pipeline", "run", "--from-config", str(run / "config.json"), "--out", str(run),
                 "--vocab", str(run / "vocab.txt")]) == 0
    assert (run / "run_record.json").read_text() == before


def test_report(pipeline_run, tmp_path, capsys):
    capsys.readouterr()
    assert main(["report", "--runs", str(pipeline_run), "--baseline", "B-FT", "--json", str(tmp_path / "t.json")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["Models", "Pivot", "xa->xb"]
    assert out[2].startswith("B-FT (Baseline)")
    assert out[3].startswith("biCPT,3-B-FT") and "(" in out[3]
    assert json.loads((tmp_path / "t.json").read_text())["directions"] == ["xa->xb"]


def test_report_missing_baseline(pipeline_run, capsys):
    assert main(["report", "--runs", str(pipeline_run), "--baseline", "O2M-FT"]) == 1
    assert "error: eval:" in capsys.readouterr().err


def test_translate_with_ensemble(pipeline_run, small_manifest_path, tmp_path, capsys):
    stage = sorted((pipeline_run / "bicpt-3bft" / "stages").iterdir())[-1]
    ckpt = sorted(stage.glob("checkpoint_*.lrlf"))[-1]
    src = small_manifest_path.parent / "parallel" / "xa-xb.in.test.xa"
    vocab = pipeline_run / "bicpt-3bft" / "vocab.txt"
    base = ["translate", "--vocab", str(vocab), "--src", str(src), "--src-lang", "xa", "--tgt-lang", "xb", "--beam", "2", "--max-len", "12"]
    assert main(base + ["--model", str(ckpt), "--out", str(tmp_path / "one.txt")]) == 0
    assert main(base + ["--model", ",".join([str(ckpt)] * 3), "--out", str(tmp_path / "three.txt")]) == 0
    one = (tmp_path / "one.txt").read_bytes()
    assert one == (tmp_path / "three.txt").read_bytes()
    assert one.count(b"\n") == len(src.read_bytes().splitlines())


def test_translate_corrupt_checkpoint(tmp_path, pipeline_run, capsys):
    bad = tmp_path / "bad.lrlf"
    bad.write_bytes(b"garbage")
    (tmp_path / "src.txt").write_text("pa\n")
    code = main(["translate", "--model", str(bad), "--vocab", str(pipeline_run / "bft" / "vocab.txt"), "--src",
                 str(tmp_path / "src.txt"), "--out", str(tmp_path / "o.txt"), "--src-lang", "xa", "--tgt-lang", "xb"])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: checkpoint:")
