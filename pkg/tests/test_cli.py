import json

import numpy as np
import pytest

from diffqc.agent import load_checkpoint
from diffqc.cli import build_parser, main

TINY = """\
[task]
kind = qubit
omega = 1.0
n_steps = 6
n_sub = 4
dt = 0.05
[loss]
gamma = 1.0
c_F = 0.5
c_FN = 0.1
c_amp = 0
c_amp_sq = 0.01
[train]
batch = 8
epochs = 3
lr = 1e-2
eval_set_size = 10
[agent]
fs = 4x8, 8x6
fa = 1x6
fc = 6x6, 6x1
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(argv, out):
    code = main([*argv, "--out", str(out)])
    return code, json.loads((out / "summary.json").read_text())


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1], np.array([[float(v) for v in l.split(",")] for l in lines[2:]])


def test_train_then_eval_round_trip(tiny, tmp_path):
    out = tmp_path / "a"
    code, s = run(["train", "--config", str(tiny), "--seed", "2"], out)
    assert code == 0 and s["ok"] and s["epochs"] == 3
    for name in ("history.csv", "eval.csv", "checkpoint.json", "checkpoint.bin", "summary.json"):
        assert (out / name).exists()
    meta, header, hist = read_csv(out / "history.csv")
    assert meta == f"# config_hash={s['config_hash']} seed=2"
    assert header == "epoch,loss_total,loss_F,loss_FN,loss_amp,loss_amp_sq,mean_final_infidelity"
    assert hist.shape == (3, 7)
    _, manifest = load_checkpoint(out / "checkpoint.json")
    assert manifest["config_hash"] == s["config_hash"]

    code, e = run(["eval", "--config", str(tiny), "--seed", "2", "--checkpoint", str(out / "checkpoint.json")], tmp_path / "b")
    assert code == 0
    for k, v in s["evaluation"].items():
        assert e["evaluation"][k] == pytest.approx(v, rel=1e-12, abs=1e-12)
    _, h1, a = read_csv(out / "eval.csv")
    _, h2, b = read_csv(tmp_path / "b" / "eval.csv")
    assert h1 == h2 == "step,t,fid_mean,fid_std,u1_mean,u1_std"
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_deterministic_runs_are_byte_identical(tiny, tmp_path):
    for d in ("x", "y"):
        assert run(["train", "--config", str(tiny), "--deterministic"], tmp_path / d)[0] == 0
    for name in ("history.csv", "eval.csv", "checkpoint.bin"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_epochs_override_and_reinforce_mode(tiny, tmp_path):
    code, s = run(["train", "--config", str(tiny), "--epochs", "2"], tmp_path / "dp")
    assert code == 0 and s["epochs"] == 2
    rf = tiny.read_text() + "[reinforce]\nbatch = 16\nlr = 1e-3\nepochs = 50\n"
    tiny.write_text(rf.replace("[task]", "[run]\nmode = reinforce\n[task]"))
    code, s = run(["train", "--config", str(tiny), "--epochs", "2"], tmp_path / "pg")
    assert code == 0 and s["epochs"] == 2 and s["mode"] == "reinforce"
    _, header, _ = read_csv(tmp_path / "pg" / "history.csv")
    assert header.startswith("epoch,mean_reward,")


def test_verify(tmp_path):
    code, s = run(["verify", "--preset", "ghz-m3"], tmp_path)
    assert code == 0 and s["ok"]
    c = s["checks"]
    assert c["eigen_cat"]["fidelity"] > 0.99
    assert c["neel_degeneracy"]["two_lowest"] == [-2.0, -2.0]
    assert c["ghz_drift_invariance"]["max_fidelity_change"] < 1e-6


def test_gradcheck(tmp_path):
    code, s = run(["gradcheck", "--preset", "qubit-multi-loss", "--coords", "40"], tmp_path / "ok")
    assert code == 0 and s["max_rel_error"] < 1e-5 and s["checked"] >= 40
    assert (s["n_steps"], s["n_sub"]) == (10, 5)
    code, s = run(["gradcheck", "--preset", "qubit-multi-loss", "--coords", "10", "--tol", "1e-30"], tmp_path / "bad")
    assert code == 1 and not s["ok"]


def test_failures_exit_nonzero_and_still_summarize(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nbatch = lots\n")
    code, s = run(["train", "--config", str(bad)], tmp_path / "o")
    assert code == 1 and not s["ok"] and "bad.cfg:2" in s["error"]
    code, s = run(["eval", "--preset", "ghz-m3"], tmp_path / "none")
    assert code == 1 and "FileNotFoundError" in s["error"]
    code, s = run(["verify"], tmp_path / "p")
    assert code == 1 and "--preset" in s["error"]
    assert "error:" in capsys.readouterr().err


def test_parser_rejects_unknown_preset():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--preset", "ghz-m9"])
