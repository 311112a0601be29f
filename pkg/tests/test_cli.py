import hashlib
import json
import os
import subprocess
import sys

import pytest

from hybridocc import cli
from hybridocc import data as D
from hybridocc import models as M

TINY_CONF = """\
# small model for quick runs
hidden = 8
d_model = 8
heads = 2
d_k = 4
d_ff = 16
epochs = 60
batch_size = 8
learning_rate = 0.01
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture()
def tiny(tmp_path):
    data = tmp_path / "tiny.csv"
    assert run("synth", "--households", 1, "--days", 8, "--seed", 3, "--out", data) == 0
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY_CONF)
    return data, conf


def test_preprocess_fixture(tmp_path, capsys):
    out = tmp_path / "p.csv"
    assert run("preprocess", "--raw", D.FIXTURE_DIR, "--out", out) == 0
    text = capsys.readouterr().out
    assert "0.6250" in text and "0.6667" in text and "0.6458" in text
    assert len(D.read_processed(str(out))) == 2
    assert os.path.exists(str(out) + ".manifest.json")


def test_preprocess_default_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_DIR_ENV, D.FIXTURE_DIR)
    assert run("preprocess", "--out", tmp_path / "p.csv") == 0


def test_preprocess_empty_dir(tmp_path, capsys):
    (tmp_path / "raw").mkdir()
    assert run("preprocess", "--raw", tmp_path / "raw", "--out", tmp_path / "p.csv") == 2
    assert "no raw day files found" in capsys.readouterr().err


def test_synth_is_byte_identical_and_sized(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run("synth", "--households", 5, "--days", 60, "--seed", 0, "--out", p) == 0
    assert digest(a) == digest(b)
    lines = a.read_text().splitlines()
    assert len(lines) == 1 + 300 * 24
    assert 0.6 <= D.summarize(D.read_processed(str(a))).overall_ratio <= 0.9


def test_train_overfits_and_replays_identically(tiny, tmp_path, capsys):
    data, conf = tiny
    before = digest(data)
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", data, "--variant", "hybrid_concat", "--config", conf, "--out", ckpt) == 0
    assert digest(data) == before
    _, meta = M.load(ckpt, expected="hybrid_concat")
    assert float(meta["train_accuracy"]) >= 0.99
    assert len(meta["norm_mean"].split(",")) == 9
    trace = (tmp_path / "m.trace.csv").read_text().splitlines()
    assert len(trace) == 61
    manifest = tmp_path / "m.manifest.json"
    man = json.loads(manifest.read_text())
    assert man["subcommand"] == "train" and man["model_config"]["hidden"] == 8
    first = digest(ckpt)
    capsys.readouterr()
    assert run("replay", manifest) == 0
    assert digest(ckpt) == first


def test_train_unknown_variant(tiny, tmp_path, capsys):
    data, conf = tiny
    assert run("train", "--data", data, "--variant", "lstm", "--config", conf, "--out", tmp_path / "m") == 2
    err = capsys.readouterr().err
    assert all(v in err for v in M.VARIANTS)


@pytest.mark.parametrize("text,needle", [
    ("hiden = 8\n", "unknown config key 'hiden'"),
    ("hidden = eight\n", "bad value"),
    ("hidden 8\n", "expected 'key = value'"),
    ("epochs = 0\n", "epochs"),
])
def test_config_errors(tiny, tmp_path, capsys, text, needle):
    data, _ = tiny
    conf = tmp_path / "bad.conf"
    conf.write_text(text)
    assert run("train", "--data", data, "--variant", "hybrid_concat", "--config", conf, "--out", tmp_path / "m") == 2
    assert needle in capsys.readouterr().err


def test_malformed_processed_file(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("household,date,hour,f1,occupied\n01,d,0,x,1\n")
    assert run("train", "--data", bad, "--variant", "hybrid_concat", "--out", tmp_path / "m") == 2
    assert "bad.csv:2:" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_data_aborts_with_code_3(tiny, tmp_path):
    data, conf = tiny
    lines = data.read_text().splitlines()
    parts = lines[1].split(",")
    parts[3] = "inf"
    lines[1] = ",".join(parts)
    broken = tmp_path / "broken.csv"
    broken.write_text("\n".join(lines) + "\n")
    assert run("train", "--data", broken, "--variant", "bilstm_attention", "--config", conf,
               "--out", tmp_path / "m") == 3


def test_crossval_table_shape_and_k_check(tiny, tmp_path, capsys):
    data, conf = tiny
    conf.write_text(TINY_CONF.replace("epochs = 60", "epochs = 1"))
    out = tmp_path / "cv"
    assert run("crossval", "--data", data, "--config", conf, "--k", 2, "--out", out, "--manual-features") == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert len(rows) == 6
    assert rows[1].startswith("hybrid_concat,")
    assert len(rows[1].split(",")) == 7
    assert rows[5].startswith(cli.FEATURE_ROW)
    assert sorted(os.listdir(out)) == ["folds_long.csv", "manifest.json", "summary.csv", "summary.txt"]
    assert run("crossval", "--data", data, "--k", 9, "--out", tmp_path / "x") == 2
    assert "invalid" in capsys.readouterr().err


def test_gradcheck_passes_and_is_deterministic(tmp_path, capsys):
    assert run("gradcheck", "--seed", 1, "--out", tmp_path / "g") == 0
    first = capsys.readouterr().out
    assert "all components pass" in first
    assert run("gradcheck", "--seed", 1) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "g" / "manifest.json").exists()


def test_gradcheck_negative_control(capsys):
    assert run("gradcheck", "--corrupt-op", "layer_norm") == 1
    out = capsys.readouterr().out
    assert "failing components:" in out and "layer_norm" in out.split("failing components:")[1]


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "hybridocc.cli", "crossval", "--data", "x.csv",
                        "--variants", "nope", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2
    assert "hybrid_concat" in r.stderr
