"""End-to-end command line behaviour: exit codes, files and report output."""

import json
import os

import numpy as np
import pytest

from skelact.cli import main
from skelact.config import RunConfig, parse_text, serialize
from skelact.model import load_checkpoint
from skelact.skeldata import load_dataset


TRAIN_OVERRIDES = ["--set", "epochs=2", "--set", "warmup_epochs=1",
                   "--set", "channels=16", "--set", "batch=8"]


def _gen(tmp_path, name, seed=1, classes=4, per_class=4):
    out = os.path.join(tmp_path, name)
    rc = main(["gen-data", "--out", out, "--classes", str(classes),
               "--per-class", str(per_class), "--seed", str(seed),
               "--t-min", "24", "--t-max", "48"])
    assert rc == 0
    return out


# -- flops ---------------------------------------------------------------

def test_flops_full_scale_operating_point(capsys):
    assert main(["flops", "48", "64", "96", "12", "4", "8", "8"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["ratio"] == 48.0
    assert rec["naive_macs"] == 905969664
    assert rec["skate_macs"] == sum(rec["per_type_macs"])


def test_flops_rejects_bad_factorization(capsys):
    assert main(["flops", "47", "64", "96", "12", "4", "8", "8"]) == 2
    assert "must equal" in capsys.readouterr().err


# -- gen-data ----------------------------------------------------------------

def test_gen_data_writes_loadable_dataset(tmp_path, capsys):
    out = _gen(tmp_path, "ds")
    assert "wrote 16 sequences" in capsys.readouterr().out
    ds = load_dataset(out)
    assert len(ds.sequences) == 16 and ds.n_classes == 4


def test_gen_data_is_deterministic(tmp_path):
    a = load_dataset(_gen(tmp_path, "a", seed=9))
    b = load_dataset(_gen(tmp_path, "b", seed=9))
    for sa, sb in zip(a.sequences, b.sequences):
        assert np.array_equal(sa.frames, sb.frames)


def test_gen_data_single_class_is_usage_error(tmp_path, capsys):
    rc = main(["gen-data", "--out", os.path.join(tmp_path, "x"),
               "--classes", "1"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


# -- config ----------------------------------------------------------------

def test_config_serialize_parse_fixed_point():
    cfg = RunConfig()
    text = serialize(cfg)
    again = text
    for line in text.splitlines():
        if line and not line.startswith("#"):
            cfg = parse_text(line, cfg)
    assert serialize(cfg) == again


def test_config_override_via_cli_lands_in_config_txt(tmp_path, capsys):
    train = _gen(tmp_path, "tr")
    out = os.path.join(tmp_path, "run")
    rc = main(["train", "--train-data", train, "--eval-data", train,
               "--out", out, "--set", "epochs=1", "--set", "channels=16"])
    assert rc == 0
    text = open(os.path.join(out, "config.txt")).read()
    assert "epochs = 1" in text and "channels = 16" in text


def test_bad_override_key_is_usage_error(tmp_path, capsys):
    train = _gen(tmp_path, "tr")
    rc = main(["train", "--train-data", train, "--eval-data", train,
               "--out", os.path.join(tmp_path, "run"),
               "--set", "nosuchkey=3"])
    assert rc == 2


def test_thread_cap_must_be_integer(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SKATE_THREADS", "lots")
    assert main(["flops", "48", "64", "96", "12", "4", "8", "8"]) == 2


# -- train / eval / inspect -----------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One short training run shared by the smoke tests below."""
    tmp = str(tmp_path_factory.mktemp("cli"))
    train = _gen(tmp, "train", seed=1)
    evals = _gen(tmp, "eval", seed=2)
    out = os.path.join(tmp, "run")
    rc = main(["train", "--train-data", train, "--eval-data", evals,
               "--out", out] + TRAIN_OVERRIDES)
    assert rc == 0
    return tmp, train, evals, out


def test_train_writes_all_artifacts(trained):
    _, _, _, out = trained
    for name in ("metrics.csv", "config.txt", "best.ckpt", "curves.png"):
        path = os.path.join(out, name)
        assert os.path.exists(path) and os.path.getsize(path) > 0, name


def test_metrics_csv_layout(trained):
    _, _, _, out = trained
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert lines[0] == "# modality = joint"
    assert lines[1] == "epoch,train_loss,train_acc,eval_acc,lr"
    assert len(lines) == 2 + 2  # two epochs


def test_training_is_reproducible_byte_for_byte(trained):
    tmp, train, evals, out = trained
    out2 = os.path.join(tmp, "run2")
    assert main(["train", "--train-data", train, "--eval-data", evals,
                 "--out", out2] + TRAIN_OVERRIDES) == 0
    a = open(os.path.join(out, "metrics.csv"), "rb").read()
    b = open(os.path.join(out2, "metrics.csv"), "rb").read()
    assert a == b


def test_eval_single_checkpoint(trained, capsys):
    _, _, evals, out = trained
    capsys.readouterr()
    rc = main(["eval", "--data", evals,
               "--ckpt", os.path.join(out, "best.ckpt")])
    assert rc == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("accuracy=")
    acc = float(line.split()[0].split("=")[1])
    assert 0.0 <= acc <= 1.0


def test_eval_ensemble_of_identical_models_matches_single(trained, capsys):
    _, _, evals, out = trained
    ckpt = os.path.join(out, "best.ckpt")
    capsys.readouterr()
    assert main(["eval", "--data", evals, "--ckpt", ckpt]) == 0
    single = float(capsys.readouterr().out.split("accuracy=")[1].split()[0])
    assert main(["eval", "--data", evals, "--ckpt", ckpt, "--ckpt", ckpt,
                 "--ensemble"]) == 0
    ens = float(capsys.readouterr().out.split("accuracy=")[1].split()[0])
    assert ens == single


def test_eval_class_count_mismatch_is_usage_error(trained, capsys):
    tmp, _, _, out = trained
    other = _gen(tmp, "two", classes=2, per_class=2)
    rc = main(["eval", "--data", other,
               "--ckpt", os.path.join(out, "best.ckpt")])
    assert rc == 2
    assert "classes" in capsys.readouterr().err


def test_eval_missing_checkpoint_is_usage_error(trained, capsys):
    _, _, evals, _ = trained
    assert main(["eval", "--data", evals, "--ckpt", "/nonexistent.ckpt"]) == 2


def test_checkpoint_roundtrips_through_cli_artifacts(trained):
    _, _, _, out = trained
    params, cfg = load_checkpoint(os.path.join(out, "best.ckpt"))
    assert cfg.N_c == 4 and cfg.C == 16
    assert params.param_count() > 0


def test_inspect_writes_importance_table_and_chart(trained, capsys):
    tmp, _, evals, out = trained
    report = os.path.join(tmp, "report")
    capsys.readouterr()
    rc = main(["inspect", "--ckpt", os.path.join(out, "best.ckpt"),
               "--data", evals, "--out", report])
    assert rc == 0
    lines = open(os.path.join(report, "importance.csv")).read().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "class,name,type1,type2,type3,type4,accuracy"
    assert len(lines) == 2 + 4  # one row per class
    for row in lines[2:]:
        cells = row.split(",")
        assert len(cells) == 7
        assert all(np.isfinite(float(c)) for c in cells[2:])
    assert os.path.getsize(os.path.join(report, "importance.png")) > 0
