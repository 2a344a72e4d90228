import dataclasses
import math

import numpy as np
import pytest

from diffqc import autodiff as ad
from diffqc.agent import AgentParams, Architecture, init_params
from diffqc.integrator import StepSpec
from diffqc.losses import LossWeights
from diffqc.realspace import RealState
from diffqc.systems import drift_eigenstate, make_task
from diffqc.trainer import (
    STREAM_TEST,
    STREAM_TRAIN,
    AdamState,
    NormDriftError,
    TrainConfig,
    TrainingError,
    adam_step,
    batch_loss_and_grad,
    clip_by_global_norm,
    evaluate,
    make_test_set,
    rollout,
    train,
)

WEIGHTS = LossWeights(c_F=0.5, c_FN=0.1, c_amp=0.01, c_amp_sq=0.02)


def qubit_setup(n_steps=6, n_sub=4, dt=0.05):
    task = make_task("qubit", {"omega": 1.0}, StepSpec(n_steps, n_sub, dt))
    arch = Architecture.from_widths([(4, 8), (8, 6)], [(1, 6)], [(6, 6), (6, 1)])
    return task, arch


def small_config(**kw):
    task, arch = qubit_setup()
    base = dict(task=task, arch=arch, weights=WEIGHTS, batch=8, epochs=5, lr=1e-2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_rollout_bookkeeping():
    task = make_task("qubit", {}, StepSpec(150, 20, 0.01))
    _, arch = qubit_setup()
    ro = rollout(task.system, init_params(arch, 0), task.sample_batch(0, 1, 1, 2), task.horizon, task.target, WEIGHTS)
    tr = ro.trajectory
    assert tr.states.shape == (2, 151, 4)
    assert tr.actions.shape == (2, 150, 1)
    assert tr.fidelities.shape == (2, 150)
    assert ro.loss.shape == (2,)


def test_zero_agent_keeps_drift_eigenstate():
    task = make_task("spin_chain", {"M": 3}, StepSpec(30, 20, 0.001))
    arch = Architecture.from_widths([(16, 8)], [(6, 8)], [(8, 6)])
    eig = drift_eigenstate(task.system, 3)
    ro = rollout(task.system, init_params(arch, zero=True), eig, task.horizon, eig, LossWeights(c_F=1.0))
    assert np.abs(ro.trajectory.fidelities - 1.0).max() < 1e-4
    assert abs(float(ro.loss[0])) < 1e-4 * 30
    assert not ro.trajectory.actions.any()


def test_rollout_gradient_matches_finite_differences():
    task, arch = qubit_setup(n_steps=10, n_sub=5, dt=0.01)
    x0 = task.sample_batch(0, 1, 1, 3)

    def f(tensors):
        ro = rollout(task.system, AgentParams(arch, tensors), x0, task.horizon, task.target, WEIGHTS)
        return ad.mean(ro.loss)

    assert ad.grad_check(f, init_params(arch, 1).arrays(), eps=1e-3) < 1e-5


def test_gradient_flows_through_state_feedback():
    # the only path from fs weights to the loss runs through the states fed back to the agent
    task, arch = qubit_setup()
    p = init_params(arch, 2).traced()
    ro = rollout(task.system, p, task.sample_batch(0, 1, 1, 2), task.horizon, task.target, LossWeights(c_FN=1.0))
    g = ad.backward(ad.mean(ro.loss), p.tensors)
    assert all(np.abs(v).max() > 0 for v in g.values())


def test_adam_first_step_is_lr_times_sign(rng):
    p = {"w": rng.normal(size=(3, 4))}
    g = {"w": rng.normal(size=(3, 4)) * np.logspace(-3, 3, 12).reshape(3, 4)}
    new, st = adam_step(p, g, AdamState.create(p, 0.01))
    step = new["w"] - p["w"]
    assert np.allclose(step, -0.01 * np.sign(g["w"]), rtol=2e-5)  # eps/|g| <= 1.2e-5 here
    assert np.allclose(step, -0.01 * g["w"] / (np.abs(g["w"]) + 1e-8), rtol=1e-13)
    assert st.t == 1
    up, _ = adam_step(p, g, AdamState.create(p, 0.01), ascend=True)
    assert np.allclose(up["w"] - p["w"], -step)


def test_adam_zero_gradient_and_determinism(rng):
    p = {"a": rng.normal(size=5), "b": rng.normal(size=(2, 2))}
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    new, st = adam_step(p, zero, AdamState.create(p, 0.1))
    assert all(np.array_equal(new[k], p[k]) for k in p) and st.t == 1
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    s0 = AdamState.create(p, 0.1)
    r1, r2 = adam_step(p, g, s0), adam_step(p, g, s0)
    assert all(np.array_equal(r1[0][k], r2[0][k]) for k in p)


def test_adam_matches_reference_sequence(rng):
    p = rng.normal(size=4)
    st = AdamState.create({"p": p}, 0.05)
    m = v = np.zeros(4)
    ref = p.copy()
    cur = {"p": p}
    for t in range(1, 6):
        g = rng.normal(size=4)
        cur, st = adam_step(cur, {"p": g}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(cur["p"], ref, rtol=1e-14, atol=1e-15)


def test_adam_skips_non_finite(rng, caplog):
    p = {"w": np.ones(3)}
    new, st = adam_step(p, {"w": np.array([1.0, np.nan, 0.0])}, AdamState.create(p, 0.1))
    assert np.array_equal(new["w"], p["w"]) and st.t == 0 and st.skipped == 1
    assert "non-finite" in caplog.text
    with pytest.raises(ValueError):
        adam_step(p, {"v": np.ones(3)}, st)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c = clip_by_global_norm(g, 1.0)
    assert math.hypot(c["a"][0], c["b"][0]) == pytest.approx(1.0)
    assert clip_by_global_norm(g, 10.0) is g


def test_batch_gradient_is_mean_of_per_trajectory_gradients():
    task, arch = qubit_setup()
    p = init_params(arch, 4)
    x0 = task.sample_batch(1, 1, 1, 4)
    full = batch_loss_and_grad(task, p, x0, WEIGHTS)
    singles = [batch_loss_and_grad(task, p, x0[i : i + 1], WEIGHTS) for i in range(4)]
    assert full.loss == pytest.approx(np.mean([s.loss for s in singles]), rel=1e-13)
    for k in full.grads:
        assert np.allclose(full.grads[k], np.mean([s.grads[k] for s in singles], axis=0), rtol=1e-12, atol=1e-16)


def test_threads_give_same_gradient():
    task, arch = qubit_setup()
    p = init_params(arch, 4)
    x0 = task.sample_batch(1, 1, 1, 9)
    a = batch_loss_and_grad(task, p, x0, WEIGHTS, threads=1)
    b = batch_loss_and_grad(task, p, x0, WEIGHTS, threads=3)
    assert a.loss == pytest.approx(b.loss, rel=1e-13)
    for k in a.grads:
        assert np.allclose(a.grads[k], b.grads[k], rtol=1e-12, atol=1e-16)


def test_failure_budget():
    task, arch = qubit_setup()
    p = init_params(arch, 0)
    x0 = task.sample_batch(0, 1, 1, 100)
    x0[17] = np.nan
    res = batch_loss_and_grad(task, p, x0, WEIGHTS)
    assert res.aborted == 1 and res.trajectory.states.shape[0] == 99
    clean = batch_loss_and_grad(task, p, np.delete(x0, 17, axis=0), WEIGHTS)
    assert res.loss == pytest.approx(clean.loss, rel=1e-13)
    x0[60] = np.nan
    with pytest.raises(TrainingError):
        batch_loss_and_grad(task, p, x0, WEIGHTS)
    with pytest.raises(TrainingError):
        batch_loss_and_grad(task, p, x0, WEIGHTS, threads=4)


def test_history_and_determinism():
    cfg = small_config()
    p1, h1 = train(cfg)
    p2, h2 = train(cfg)
    assert len(h1) == cfg.epochs
    assert list(h1.column("epoch")) == [1, 2, 3, 4, 5]
    assert h1.rows == h2.rows
    assert all(np.array_equal(p1.tensors[k], p2.tensors[k]) for k in p1.tensors)
    seen = []
    train(cfg, callback=lambda e, p, row: seen.append(e))
    assert seen == [1, 2, 3, 4, 5]


def test_history_csv(tmp_path):
    _, h = train(small_config(epochs=2))
    h.write_csv(tmp_path / "h.csv", meta={"seed": 3})
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "# seed=3"
    assert lines[1] == "epoch,loss_total,loss_F,loss_FN,loss_amp,loss_amp_sq,mean_final_infidelity"
    assert len(lines) == 4


def test_training_reduces_loss():
    cfg = small_config(epochs=60, batch=16, lr=5e-3)
    _, h = train(cfg)
    loss = h.column("loss_total")
    k = len(loss) // 10
    assert loss[-k:].mean() < loss[:k].mean()


def test_train_config_validation():
    with pytest.raises(ValueError):
        small_config(batch=0)
    with pytest.raises(ValueError):
        small_config(lr=0.0)
    task = make_task("spin_chain", {"M": 3}, StepSpec(2, 2, 0.01))
    with pytest.raises(ValueError):
        small_config(task=task)


def test_evaluate_statistics():
    task, arch = qubit_setup()
    p = init_params(arch, 1)
    ts = make_test_set(task, 5, 0)
    ts[3] = ts[1]
    ev = evaluate(p, ts, task.horizon, task.target, task.system)
    tr = ev.trajectory
    assert np.array_equal(tr.states[3], tr.states[1]) and np.array_equal(tr.actions[3], tr.actions[1])
    assert ev.fid_mean.shape == (6,) and ev.u_mean.shape == (6, 1)
    assert ev.final_mean == pytest.approx(tr.fidelities[:, -1].mean())
    assert np.allclose(ev.times, 0.2 * np.arange(1, 7))
    assert ev.summary()["n_states"] == 5


def test_evaluate_asserts_norm_drift():
    task = make_task("qubit", {}, StepSpec(5, 2, 0.3))
    _, arch = qubit_setup()
    p = init_params(arch, 0)
    with pytest.raises(NormDriftError):
        evaluate(p, make_test_set(task, 2), task.horizon, task.target, task.system)
    ev = evaluate(p, make_test_set(task, 2), task.horizon, task.target, task.system, check_norm=False)
    assert ev.max_norm_drift >= 1e-4


def test_eval_csv(tmp_path):
    task = make_task("spin_chain", {"M": 2}, StepSpec(3, 2, 0.01))
    arch = Architecture.from_widths([(8, 4)], [(4, 4)], [(4, 4)])
    ev = evaluate(init_params(arch, 0), make_test_set(task, 3), task.horizon, task.target, task.system)
    ev.write_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "step,t,fid_mean,fid_std," + ",".join(f"u{k}_mean,u{k}_std" for k in range(1, 5))
    assert len(lines) == 4


def test_test_set_disjoint_from_training():
    task, _ = qubit_setup()
    ts = make_test_set(task, 16, 0)
    assert np.array_equal(ts, task.sample_batch(0, STREAM_TEST, 0, 16))
    for epoch in range(0, 4):
        tr = task.sample_batch(0, STREAM_TRAIN, epoch, 16)
        assert not (ts[:, None, :] == tr[None, :, :]).all(-1).any()
