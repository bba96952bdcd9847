import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from snfkit import training
from snfkit.chain import NonFiniteError
from snfkit.cli import main

MINIMAL = """seed: 0
target: {kind: gaussian, mean: [1.0], var: 2.0}
latent: {dim: 1}
chain:
  layers:
    - {kind: affine}
    - {kind: mh, sigma: 0.5}
train: {steps: 12, batch_size: 32, lr: 0.01, eval_every: 5, eval_samples: 50, checkpoint_every: 5}
"""

IDENTITY = """seed: 0
target: {kind: gaussian, mean: [0.0], var: 4.0}
latent: {dim: 1}
chain:
  layers:
    - {kind: coupling, hidden: [4]}
train: {steps: 1, batch_size: 8, lr: 0.0}
"""


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        p = tmp_path / name
        p.write_text(text)
        return str(p)
    return _write


def train_run(tmp_path, write, text=MINIMAL, name="run"):
    cfg = write(f"{name}.yaml", text)
    out = tmp_path / name
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_train_writes_outputs(tmp_path, write):
    out = train_run(tmp_path, write)
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == ["step", "loss", "grad_norm", "weight_1", "weight_2", "energy_distance"]
    assert len(rows) == 13
    assert json.loads((out / "checkpoint.json").read_text())["config"]["seed"] == 0
    assert "kind: affine" in (out / "config.yaml").read_text()


def test_train_is_deterministic(tmp_path, write):
    a = train_run(tmp_path, write, name="a")
    b = train_run(tmp_path, write, name="b")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()


def test_train_config_error_names_key(tmp_path, write, capsys):
    cfg = write("bad.yaml", MINIMAL.replace("sigma: 0.5", "sigma: -0.5"))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "bad")]) == 2
    assert "chain.layers[1].sigma" in capsys.readouterr().err
    assert not (tmp_path / "bad").exists()


def test_train_divergence_exit_code(tmp_path, write, monkeypatch, capsys):
    real = training.snf_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 8:
            raise NonFiniteError("injected")
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "snf_loss", flaky)
    cfg = write("m.yaml", MINIMAL)
    out = tmp_path / "div"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 3
    assert json.loads((out / "checkpoint.json").read_text())["step"] == 5
    assert not (out / "metrics.csv").exists()
    assert "step 8" in capsys.readouterr().err


def test_sample_outputs(tmp_path, write):
    out = train_run(tmp_path, write)
    ck = str(out / "checkpoint.json")
    s1, s2, s0 = (str(tmp_path / f) for f in ("s1.csv", "s2.csv", "s0.csv"))
    paths = str(tmp_path / "paths.csv")
    assert main(["sample", "--checkpoint", ck, "--n", "20", "--seed", "4", "--out", s1, "--paths", paths]) == 0
    assert main(["sample", "--checkpoint", ck, "--n", "20", "--seed", "4", "--out", s2]) == 0
    assert open(s1, "rb").read() == open(s2, "rb").read()
    lines = open(s1).read().splitlines()
    assert lines[0] == "x0" and len(lines) == 21
    assert open(paths).readline().strip() == "x0_0,x1_0,x2_0,log_weight_sum"
    assert main(["sample", "--checkpoint", ck, "--n", "0", "--out", s0]) == 0
    assert open(s0).read() == "x0\n"


def test_identity_chain_samples_follow_latent(tmp_path, write):
    out = train_run(tmp_path, write, IDENTITY, "ident")
    s = str(tmp_path / "s.csv")
    assert main(["sample", "--checkpoint", str(out / "checkpoint.json"), "--n", "4000", "--out", s]) == 0
    x = np.loadtxt(s, delimiter=",", skiprows=1)
    fresh = np.random.default_rng(99).standard_normal(4000)
    assert stats.ks_2samp(x, fresh).pvalue > 1e-3


def test_sample_checkpoint_mismatch(tmp_path, write, capsys):
    out = train_run(tmp_path, write)
    payload = json.loads((out / "checkpoint.json").read_text())
    payload["config"]["chain"]["layers"].append({"kind": "affine"})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(payload))
    assert main(["sample", "--checkpoint", str(bad), "--n", "3", "--out", str(tmp_path / "x.csv")]) == 2
    assert "mismatch" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_eval(tmp_path, write, capsys):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((300, 2))
    b = rng.standard_normal((300, 2)) + [1.0, 0.0]

    def dump(name, x):
        return write(name, "x0,x1\n" + "".join(f"{float(r[0])!r},{float(r[1])!r}\n" for r in x))

    fa, fb = dump("a.csv", a), dump("b.csv", b)
    assert main(["eval", fa, fa]) == 0
    assert json.loads(capsys.readouterr().out)["energy_distance"] == 0.0
    out = str(tmp_path / "e.json")
    assert main(["eval", fa, fb, "--out", out]) == 0
    from snfkit.evaluation import energy_distance
    report = json.loads(open(out).read())
    assert report["energy_distance"] == energy_distance(a, b)
    assert report["a"]["n"] == 300


def test_eval_errors(write, capsys):
    good = write("g.csv", "x0,x1\n1.0,2.0\n3.0,4.0\n")
    one = write("o.csv", "x0\n1.0\n")
    broken = write("b.csv", "x0,x1\n1.0,2.0\n3.0\n")
    words = write("w.csv", "x0,x1\n1.0,2.0\n1.0,2.0\n1.0,oops\n")
    assert main(["eval", good, one]) == 2
    assert "dimension mismatch" in capsys.readouterr().err
    assert main(["eval", good, broken]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["eval", words, good]) == 2
    assert "line 4" in capsys.readouterr().err


def test_verify(capsys):
    assert main(["verify", "--suite", "detailed-balance", "--threads", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert all(set(r) == {"check", "tolerance", "observed", "pass"} for r in report)
    assert all(r["pass"] for r in report)
    assert main(["verify", "--suite", "nonsense"]) == 2
    err = capsys.readouterr().err
    assert "detailed-balance" in err and "all" in err


def test_entry_point_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "snfkit.cli", "verify", "--suite", "nf-snf"],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout)[0]["check"] == "nf-snf/per-sample"
