import hashlib
import json
import os
import subprocess
import sys
from types import SimpleNamespace

import pytest

from coss import cli


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    corpus = tmp_path_factory.mktemp("corpus")
    cfg = {
        "seed": 5,
        "paradigm": "medcoss",
        "stages": [{"slot": "text", "epochs": 2},
                   {"slot": "image2d", "epochs": 2}],
        "model": {"embed_dim": 16, "depth": 2, "heads": 2, "decoder_dim": 8,
                  "decoder_depth": 1, "decoder_heads": 2, "vocab_size": 64},
        "optimizer": {"batch_size": 4, "warmup_epochs": 1, "peak_lr": 1e-3},
        "data": {"root": str(corpus), "text_len": 12, "image_size": [8, 8],
                 "volume_size": [4, 8, 8], "patch2d": [4, 4],
                 "patch3d": [2, 4, 4]},
        "synthetic": {"counts": {"text": 10, "image2d": 8},
                      "text_states": 20, "text_words": [3, 8]},
        "finetune": {"epochs": 2, "batch_size": 4, "lr": 1e-3},
    }
    cfgpath = tmp_path_factory.mktemp("cfg") / "run.json"
    cfgpath.write_text(json.dumps(cfg))
    assert run("gen-data", "--config", str(cfgpath), "--out", str(corpus)) == 0
    return SimpleNamespace(cfgpath=str(cfgpath), corpus=str(corpus))


@pytest.fixture(scope="module")
def pretrained(setup, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("pretrain", "--config", setup.cfgpath, "--out", str(out)) == 0
    return str(out)


# -- usage and exit codes ------------------------------------------------


def test_no_verb_exits_1(capsys):
    assert run() == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_verb_exits_1(capsys):
    assert run("transmogrify") == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_out_exits_1():
    assert run("pretrain") == 1


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        run("--help")
    assert exc.value.code == 0


def test_unknown_verb_subprocess():
    proc = subprocess.run([sys.executable, "-m", "coss.cli", "transmogrify"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage" in proc.stderr.lower()


def test_config_error_exits_2(setup, tmp_path):
    out = tmp_path / "bad"
    rc = run("pretrain", "--config", setup.cfgpath,
             "--override", "model.embed_dim=7", "--out", str(out))
    assert rc == 2
    # the resolved config still lands before validation stops the run
    assert (out / "config.json").is_file()


def test_bad_override_exits_2(setup, tmp_path):
    rc = run("gen-data", "--config", setup.cfgpath,
             "--override", "nonsense", "--out", str(tmp_path / "x"))
    assert rc == 2


def test_garbage_checkpoint_exits_3(tmp_path, capsys):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert run("inspect-ckpt", str(bad)) == 3
    assert run("inspect-ckpt", str(tmp_path / "missing.ckpt")) == 3
    capsys.readouterr()


# -- gen-data ------------------------------------------------------------


def test_gen_data_outputs(setup):
    assert os.path.isfile(os.path.join(setup.corpus, "manifest.tsv"))
    resolved = json.load(open(os.path.join(setup.corpus, "config.json")))
    assert resolved["seed"] == 5
    assert resolved["synthetic"]["counts"] == {"text": 10, "image2d": 8}


def test_seed_alias_override(setup, tmp_path):
    out = tmp_path / "alias"
    rc = run("gen-data", "--config", setup.cfgpath,
             "--override", "scheduler.seed=7", "--out", str(out))
    assert rc == 0
    assert json.load(open(out / "config.json"))["seed"] == 7


def test_seed_flag(setup, tmp_path):
    out = tmp_path / "flag"
    rc = run("gen-data", "--config", setup.cfgpath, "--seed", "9",
             "--out", str(out))
    assert rc == 0
    assert json.load(open(out / "config.json"))["seed"] == 9


# -- pretrain ------------------------------------------------------------


def test_pretrain_artifacts(pretrained):
    for name in ("config.json", "vocab.tsv", "final.ckpt", "stage_1.ckpt",
                 "stage_2.ckpt", "buffer.tsv", "metrics.jsonl",
                 "retention.jsonl"):
        assert os.path.isfile(os.path.join(pretrained, name)), name
    rows = [json.loads(line) for line in
            open(os.path.join(pretrained, "metrics.jsonl"))]
    assert all(isinstance(r["loss"], float) for r in rows)
    assert {r["stage"] for r in rows} == {1, 2}


def test_pretrain_rerun_from_resolved_config(pretrained, tmp_path):
    out2 = tmp_path / "again"
    rc = run("pretrain", "--config", os.path.join(pretrained, "config.json"),
             "--out", str(out2))
    assert rc == 0
    h1 = hashlib.sha256(
        open(os.path.join(pretrained, "final.ckpt"), "rb").read()).hexdigest()
    h2 = hashlib.sha256(open(out2 / "final.ckpt", "rb").read()).hexdigest()
    assert h1 == h2


# -- inspect -------------------------------------------------------------


def test_inspect_ckpt(pretrained, capsys):
    rc = run("inspect-ckpt", os.path.join(pretrained, "final.ckpt"))
    out = capsys.readouterr().out
    assert rc == 0
    assert "sha256:" in out
    assert "total parameters:" in out
    assert "core." in out
    assert "medcoss" in out  # paradigm recorded in meta


# -- evaluate ------------------------------------------------------------


def test_evaluate_report(setup, pretrained, tmp_path, capsys):
    out = tmp_path / "eval"
    ckpt = os.path.join(pretrained, "final.ckpt")
    rc = run("evaluate", "--config", setup.cfgpath,
             "--override", f"evaluate.checkpoint={ckpt}", "--out", str(out))
    assert rc == 0
    report = json.load(open(out / "report.json"))
    assert set(report["losses"]) == {"text", "image2d"}
    for loss in report["losses"].values():
        assert loss == pytest.approx(loss) and loss > 0.0
    vals = list(report["losses"].values())
    assert report["combined"] == pytest.approx(sum(vals) / len(vals))
    capsys.readouterr()


def test_evaluate_missing_checkpoint_exits_2(setup, tmp_path):
    rc = run("evaluate", "--config", setup.cfgpath,
             "--out", str(tmp_path / "ev2"))
    assert rc == 2


# -- sample-buffer -------------------------------------------------------


def test_sample_buffer(setup, pretrained, tmp_path, capsys):
    out = tmp_path / "buf"
    ckpt = os.path.join(pretrained, "final.ckpt")
    rc = run("sample-buffer", "--config", setup.cfgpath,
             "--override", f"sample.checkpoint={ckpt}", "--out", str(out))
    assert rc == 0
    lines = [ln for ln in open(out / "buffer.tsv").read().splitlines() if ln]
    assert len(lines) == 5  # 10 text samples -> 1 cluster of 5 kept
    assert all(ln.split("\t")[1] == "text" for ln in lines)
    capsys.readouterr()


# -- finetune ------------------------------------------------------------


def test_finetune_report(setup, pretrained, tmp_path, capsys):
    out = tmp_path / "ft"
    ckpt = os.path.join(pretrained, "final.ckpt")
    rc = run("finetune", "--config", setup.cfgpath,
             "--override", f"finetune.checkpoint={ckpt}", "--out", str(out))
    assert rc == 0
    report = json.load(open(out / "report.json"))
    assert report["slot"] == "image2d"
    assert report["task"] == "mlp2"
    assert 0.0 <= report["test"]["acc"] <= 1.0
    assert len(report["train_loss"]) == 2
    capsys.readouterr()


def test_finetune_bad_task_exits_2(setup, pretrained, tmp_path):
    ckpt = os.path.join(pretrained, "final.ckpt")
    rc = run("finetune", "--config", setup.cfgpath,
             "--override", f"finetune.checkpoint={ckpt}",
             "--override", "finetune.task=mlp9",
             "--out", str(tmp_path / "ftbad"))
    assert rc == 2


# -- environment ---------------------------------------------------------


def test_thread_cap_env(tmp_path):
    env = dict(os.environ, COSS_THREADS="2")
    env.pop("OMP_NUM_THREADS", None)
    proc = subprocess.run(
        [sys.executable, "-c",
         "import coss, os; print(os.environ['OMP_NUM_THREADS'], "
         "os.environ['NUMBA_NUM_THREADS'])"],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout.split() == ["2", "2"]
