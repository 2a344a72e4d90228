"""Rollouts through the agent and the integrator, Adam updates and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .agent import AgentParams, Architecture, forward, first_step_action, init_params
from .integrator import NonFiniteStateError, StepSpec, evolve_batch, norm_drift
from .losses import LossParts, LossWeights, loss_parts, total_loss
from .realspace import ControlSystem, RealState, overlap_matrix
from .systems import TaskSpec

log = logging.getLogger(__name__)

# Streams keep the training, test and policy-sampling random numbers disjoint.
STREAM_TRAIN = 1
STREAM_TEST = 2
STREAM_POLICY = 3

NORM_DRIFT_LIMIT = 1e-4
FAILURE_BUDGET = 0.01
HISTORY_FIELDS = ("epoch", "loss_total", "loss_F", "loss_FN", "loss_amp", "loss_amp_sq", "mean_final_infidelity")


class TrajectoryAbort(RuntimeError):
    def __init__(self, rows, step: int, epoch: int | None = None):
        self.rows = np.asarray(rows, dtype=int)
        self.step = step
        self.epoch = epoch
        super().__init__(f"non-finite state at step {step} (epoch {epoch}) in trajectories {self.rows.tolist()}")


class TrainingError(RuntimeError):
    pass


class NormDriftError(AssertionError):
    pass


@dataclass
class Trajectory:
    """A batch of rollouts: states (b, N+1, 2D), actions (b, N, K), fidelities (b, N).

    ``fidelities[:, i]`` belongs to ``states[:, i + 1]``; ``actions[:, i]`` is the
    control held on the interval from t_i to t_{i+1}.
    """

    states: np.ndarray
    actions: np.ndarray
    fidelities: np.ndarray
    final_norm_drift: np.ndarray

    def __len__(self):
        return self.states.shape[0]


@dataclass
class Rollout:
    trajectory: Trajectory
    parts: LossParts
    loss: object  # per-trajectory total loss, Tensor when recorded


def _as_batch(initial) -> np.ndarray:
    if isinstance(initial, RealState):
        return initial.stacked[None, :]
    x = np.asarray(initial, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def rollout(
    system: ControlSystem,
    params: AgentParams,
    initial,
    spec: StepSpec,
    target: RealState,
    weights: LossWeights | None = None,
    epoch: int | None = None,
) -> Rollout:
    """Run the closed loop agent -> integrator for N intervals.

    If ``params`` holds tape leaves (see AgentParams.traced) every operation is
    recorded, including the feedback of each state and action into the next
    agent call.
    """
    x0 = _as_batch(initial)
    b = x0.shape[0]
    params.arch.check_system(system.dim, system.num_controls)
    ovm = overlap_matrix(target)
    x = x0
    u = first_step_action(system.num_controls, b)
    xs, us, fs = [x0], [], []
    for i in range(spec.n_steps):
        u = forward(params, x, u)
        try:
            x = evolve_batch(system, x, u, spec.n_sub, spec.dt)
        except NonFiniteStateError as exc:
            raise TrajectoryAbort(exc.rows, i, epoch) from exc
        fid = ad.sum(ad.square(ad.matmul(x, ovm)), axis=-1)
        xs.append(ad.value(x))
        us.append(u)
        fs.append(fid)
    fid = ad.stack(fs, axis=-1)
    acts = ad.stack(us, axis=-2)
    parts = loss_parts(fid, acts, weights.gamma if weights else 1.0, check=False)
    states = np.stack(xs, axis=1)
    traj = Trajectory(states, ad.value(acts), ad.value(fid), norm_drift(states[:, -1]))
    loss = total_loss(weights, parts) if weights is not None else None
    return Rollout(traj, parts, loss)


# -- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    lr: float
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def create(cls, params: dict, lr: float) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, lr)


def adam_step(params: dict, grads: dict, st: AdamState, ascend: bool = False) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and a new state.

    Non-finite gradients leave the parameters untouched and bump ``st.skipped``.
    """
    if set(grads) != set(params):
        raise ValueError("gradient names do not match the parameters")
    if not all(np.isfinite(g).all() for g in grads.values()):
        log.warning("non-finite gradient at Adam step %d; update skipped", st.t + 1)
        return dict(params), AdamState(st.m, st.v, st.lr, st.t, st.beta1, st.beta2, st.eps, st.skipped + 1)
    t = st.t + 1
    bc1 = 1.0 - st.beta1**t
    bc2 = 1.0 - st.beta2**t
    sign = 1.0 if ascend else -1.0
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = st.beta1 * st.m[k] + (1.0 - st.beta1) * g
        v = st.beta2 * st.v[k] + (1.0 - st.beta2) * (g * g)
        new_p[k] = p + sign * st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, st.lr, t, st.beta1, st.beta2, st.eps, st.skipped)


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


# -- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    task: TaskSpec
    arch: Architecture
    weights: LossWeights
    batch: int
    epochs: int
    lr: float
    seed: int = 0
    eval_set_size: int = 64
    threads: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        self.arch.check_system(self.task.dim, self.task.num_controls)


@dataclass
class BatchResult:
    loss: float
    parts: dict
    grads: dict
    mean_final_fidelity: float
    max_norm_drift: float
    aborted: int
    trajectory: Trajectory | None = None


def _chunk_grads(task, params, x0, weights, scale, epoch):
    p = params.traced()
    ro = rollout(task.system, p, x0, task.horizon, task.target, weights, epoch=epoch)
    chunk_total = ad.scale(ad.sum(ro.loss), scale)
    grads = ad.backward(chunk_total, p.tensors)
    return ro, float(ad.value(chunk_total)), grads


def batch_loss_and_grad(
    task: TaskSpec,
    params: AgentParams,
    x0: np.ndarray,
    weights: LossWeights,
    threads: int = 1,
    epoch: int | None = None,
    max_failures: int | None = None,
) -> BatchResult:
    """Mean per-trajectory loss over the batch and its gradient.

    Trajectories that blow up are dropped and the batch is rerun without them;
    more than ``max_failures`` drops raise TrainingError.
    """
    b = x0.shape[0]
    if max_failures is None:
        max_failures = int(math.floor(FAILURE_BUDGET * b))
    alive = np.arange(b)
    while True:
        chunks = [c for c in np.array_split(alive, max(1, min(threads, alive.size))) if c.size]
        scale = 1.0 / alive.size
        try:
            if len(chunks) == 1:
                results = [_chunk_grads(task, params, x0[chunks[0]], weights, scale, epoch)]
            else:
                with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                    futures = [pool.submit(_chunk_grads, task, params, x0[c], weights, scale, epoch) for c in chunks]
                    results = [f.result() for f in futures]
            break
        except TrajectoryAbort as exc:
            # Rows are chunk-local; map the first failing chunk back to batch indices.
            bad = _locate_abort(task, params, x0, alive, chunks, exc)
            alive = np.setdiff1d(alive, bad)
            dropped = b - alive.size
            log.warning("epoch %s: dropped %d trajectories (%s)", epoch, dropped, exc)
            if dropped > max_failures or alive.size == 0:
                raise TrainingError(
                    f"{dropped} of {b} trajectories aborted in epoch {epoch}, over the {FAILURE_BUDGET:.0%} budget"
                ) from exc
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    total = 0.0
    for _, val, g in results:  # fixed chunk order keeps the reduction deterministic
        total += val
        for k in grads:
            grads[k] += g[k]
    trajs = [r[0].trajectory for r in results]
    fid = np.concatenate([t.fidelities for t in trajs])
    parts = {}
    for name in ("F", "FN", "amp", "amp_sq"):
        parts[name] = float(np.mean(np.concatenate([np.atleast_1d(ad.value(getattr(r[0].parts, name))) for r in results])))
    traj = Trajectory(
        np.concatenate([t.states for t in trajs]),
        np.concatenate([t.actions for t in trajs]),
        fid,
        np.concatenate([t.final_norm_drift for t in trajs]),
    )
    return BatchResult(
        loss=total,
        parts=parts,
        grads=grads,
        mean_final_fidelity=float(fid[:, -1].mean()),
        max_norm_drift=float(traj.final_norm_drift.max()),
        aborted=b - alive.size,
        trajectory=traj,
    )


def _locate_abort(task, params, x0, alive, chunks, exc) -> np.ndarray:
    if len(chunks) == 1:
        return alive[exc.rows]
    bad = []
    for c in chunks:
        try:
            rollout(task.system, params, x0[c], task.horizon, task.target, None)
        except TrajectoryAbort as inner:
            bad.extend(c[inner.rows].tolist())
    return np.asarray(bad, dtype=int)


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path, fields=HISTORY_FIELDS, meta: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if meta:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[f])) for f in fields[1:]])


def train(
    config: TrainConfig,
    params: AgentParams | None = None,
    callback: Callable | None = None,
) -> tuple[AgentParams, History]:
    """Fresh initial states every epoch, one Adam step per epoch on the batch-mean loss.

    ``callback(epoch, params, row)`` runs after each update.
    """
    task = config.task
    if params is None:
        params = init_params(config.arch, config.seed)
    arrays = params.arrays()
    adam = AdamState.create(arrays, config.lr)
    history = History()
    for epoch in range(1, config.epochs + 1):
        x0 = task.sample_batch(config.seed, STREAM_TRAIN, epoch, config.batch)
        res = batch_loss_and_grad(task, AgentParams(config.arch, arrays), x0, config.weights, config.threads, epoch)
        grads = res.grads
        if config.grad_clip:
            grads = clip_by_global_norm(grads, config.grad_clip)
        arrays, adam = adam_step(arrays, grads, adam)
        row = dict(
            epoch=epoch,
            loss_total=res.loss,
            loss_F=res.parts["F"],
            loss_FN=res.parts["FN"],
            loss_amp=res.parts["amp"],
            loss_amp_sq=res.parts["amp_sq"],
            mean_final_infidelity=1.0 - res.mean_final_fidelity,
            max_norm_drift=res.max_norm_drift,
            aborted=res.aborted,
        )
        history.append(**row)
        if epoch == 1 or epoch % 50 == 0 or epoch == config.epochs:
            log.info("epoch %d loss %.6g final infidelity %.3e", epoch, res.loss, 1.0 - res.mean_final_fidelity)
        if callback is not None:
            callback(epoch, AgentParams(config.arch, arrays), row)
    return AgentParams(config.arch, arrays), history


# -- evaluation ----------------------------------------------------------------------

@dataclass
class EvalResult:
    times: np.ndarray        # t_1 .. t_N
    fid_mean: np.ndarray     # per step, (N,)
    fid_std: np.ndarray
    u_mean: np.ndarray       # (N, K)
    u_std: np.ndarray
    final_mean: float
    final_std: float
    final_min: float
    max_norm_drift: float
    trajectory: Trajectory

    def summary(self) -> dict:
        return {
            "final_fidelity_mean": self.final_mean,
            "final_fidelity_std": self.final_std,
            "final_fidelity_min": self.final_min,
            "max_norm_drift": self.max_norm_drift,
            "n_states": len(self.trajectory),
        }

    def write_csv(self, path, meta: dict | None = None) -> None:
        K = self.u_mean.shape[1]
        header = ["step", "t", "fid_mean", "fid_std"]
        for k in range(1, K + 1):
            header += [f"u{k}_mean", f"u{k}_std"]
        with open(path, "w", newline="") as fh:
            if meta:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(self.times)):
                row = [i + 1, repr(float(self.times[i])), repr(float(self.fid_mean[i])), repr(float(self.fid_std[i]))]
                for k in range(K):
                    row += [repr(float(self.u_mean[i, k])), repr(float(self.u_std[i, k]))]
                w.writerow(row)


def evaluate(
    params: AgentParams,
    test_states,
    spec: StepSpec,
    target: RealState,
    system: ControlSystem,
    check_norm: bool = True,
) -> EvalResult:
    """Run the trained agent on a fixed test set without recording gradients."""
    ro = rollout(system, AgentParams(params.arch, params.arrays()), test_states, spec, target)
    tr = ro.trajectory
    drift = float(norm_drift(tr.states).max())
    if check_norm and drift >= NORM_DRIFT_LIMIT:
        raise NormDriftError(f"norm drift {drift:.3e} exceeds {NORM_DRIFT_LIMIT:g}")
    fin = tr.fidelities[:, -1]
    return EvalResult(
        times=spec.times()[1:],
        fid_mean=tr.fidelities.mean(axis=0),
        fid_std=tr.fidelities.std(axis=0),
        u_mean=tr.actions.mean(axis=0),
        u_std=tr.actions.std(axis=0),
        final_mean=float(fin.mean()),
        final_std=float(fin.std()),
        final_min=float(fin.min()),
        max_norm_drift=drift,
        trajectory=tr,
    )


def make_test_set(task: TaskSpec, size: int, seed: int = 0) -> np.ndarray:
    """Fixed evaluation states, drawn from a stream disjoint from training."""
    return task.sample_batch(seed, STREAM_TEST, 0, size)
