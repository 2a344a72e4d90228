"""Vanilla policy gradient with a Gaussian policy, as a baseline for the DP trainer.

The mean of the policy is an agent network of the same architecture as the DP
agent; the variance is fixed.  Rollouts only sample, so no gradient ever flows
through the integrator.  The estimator is

    grad J = mean_batch  sum_n  grad log pi(u_n | s_n, u_{n-1}) * R_hat_n

with R_hat the normalized rewards-to-go.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .agent import AgentParams, forward, init_params
from .integrator import NonFiniteStateError, evolve_batch, norm_drift
from .losses import LossWeights
from .realspace import batch_fidelity
from .systems import TaskSpec
from .trainer import (
    FAILURE_BUDGET,
    STREAM_POLICY,
    STREAM_TRAIN,
    AdamState,
    History,
    TrainConfig,
    TrainingError,
    adam_step,
)

log = logging.getLogger(__name__)

DEFAULT_SIGMA2 = 0.04
HISTORY_FIELDS = ("epoch", "mean_reward", "loss_F", "loss_FN", "loss_amp", "loss_amp_sq", "mean_final_infidelity")
GRAD_CHUNK_ROWS = 8192


@dataclass
class GaussianPolicy:
    params: AgentParams
    sigma2: float = DEFAULT_SIGMA2

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("policy variance must be positive")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def mean(self, x, u_prev):
        return forward(self.params, x, u_prev)


def log_prob(u, mu, sigma2: float):
    """-1/2 ((u - mu)^2 / sigma2 + log(2 pi sigma2)), summed over the control components."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    z = ad.scale(ad.square(ad.sub(u, mu)), -0.5 / sigma2)
    return ad.sum(ad.sub(z, 0.5 * math.log(2.0 * math.pi * sigma2)), axis=-1)


def rewards_to_go(fidelities, actions, weights: LossWeights) -> np.ndarray:
    """R_n = sum_{n'=n}^{N} [c_F F_{n'} - c_amp|u_n| - c'_amp|u_n|^2 + delta_{n'N} c_FN F_{n'}].

    ``fidelities`` has shape (..., N+1) and covers t_0 .. t_N.  ``actions`` has
    shape (..., N, K) or (..., N+1, K); no control is applied at t_N, so a missing
    final action counts as zero.  The action penalty depends on n, not n', so it
    enters R_n once per remaining summand.
    """
    f = np.asarray(fidelities, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    n1 = f.shape[-1]
    if a.shape[-2] == n1 - 1:
        pad = np.zeros(a.shape[:-2] + (1, a.shape[-1]))
        a = np.concatenate([a, pad], axis=-2)
    if a.shape[-2] != n1:
        raise ValueError(f"{n1} fidelities need {n1 - 1} or {n1} actions, got {a.shape[-2]}")
    per_step = weights.c_F * f
    per_step[..., -1] += weights.c_FN * f[..., -1]
    suffix = np.flip(np.cumsum(np.flip(per_step, -1), -1), -1)
    sq = (a * a).sum(axis=-1)
    count = np.arange(n1, 0, -1, dtype=np.float64)  # N - n + 1 summands
    return suffix - count * (weights.c_amp * np.sqrt(sq) + weights.c_amp_sq * sq)


def normalize(R) -> np.ndarray:
    """Standardize with one mean and one std pooled over batch and time."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim < 2 or R.shape[0] < 2:
        raise ValueError("normalization needs a batch of at least two trajectories")
    sd = R.std()
    if not sd > 0 or sd < 1e-12 * max(1.0, abs(R.mean())):
        log.warning("rewards-to-go have zero variance; normalized rewards set to zero")
        return np.zeros_like(R)
    return (R - R.mean()) / sd


def episode_return(fidelities, actions, weights: LossWeights) -> np.ndarray:
    """Per-trajectory total reward on the DP loss scale.

    Equals c_F sum F_i + c_FN F_N - c_amp sum|u| - c'_amp sum|u|^2 over i = 1..N,
    i.e. the negated DP loss (with gamma = 1) up to the constant c_F N + c_FN.
    """
    f = np.asarray(fidelities)[..., 1:]
    sq = (np.asarray(actions) ** 2).sum(axis=-1)
    return (
        weights.c_F * f.sum(-1)
        + weights.c_FN * f[..., -1]
        - weights.c_amp * np.sqrt(sq).sum(-1)
        - weights.c_amp_sq * sq.sum(-1)
    )


@dataclass
class Episodes:
    """Sampled rollouts: states (b, N+1, 2D), previous actions (b, N, K), actions (b, N, K), fidelities (b, N+1)."""

    states: np.ndarray
    prev_actions: np.ndarray
    actions: np.ndarray
    fidelities: np.ndarray
    aborted: int


def policy_noise(seed: int, epoch: int, batch: int, n_steps: int, k: int) -> np.ndarray:
    """Standard normal draws; entry (r, n) depends only on (seed, epoch, r, n)."""
    rng = np.random.default_rng([seed, STREAM_POLICY, epoch])
    return rng.standard_normal((batch, n_steps, k))


def sample_episodes(policy: GaussianPolicy, task: TaskSpec, x0: np.ndarray, noise: np.ndarray) -> Episodes:
    """Roll out the stochastic policy; trajectories that blow up are dropped."""
    spec = task.horizon
    system = task.system
    b, n = x0.shape[0], spec.n_steps
    K = system.num_controls
    params = AgentParams(policy.params.arch, policy.params.arrays())
    states = np.empty((b, n + 1, x0.shape[1]))
    prev = np.zeros((b, n, K))
    acts = np.empty((b, n, K))
    states[:, 0] = x0
    alive = np.ones(b, dtype=bool)
    u = np.zeros((b, K))
    for i in range(n):
        prev[:, i] = u
        mu = forward(params, states[:, i], u)
        u = mu + policy.sigma * noise[:, i]
        acts[:, i] = u
        idx = np.flatnonzero(alive)
        while True:
            try:
                states[idx, i + 1] = evolve_batch(system, states[idx, i], u[idx], spec.n_sub, spec.dt)
                break
            except NonFiniteStateError as exc:
                alive[idx[exc.rows]] = False
                idx = np.flatnonzero(alive)
                if idx.size == 0:
                    raise TrainingError("every trajectory blew up") from exc
        states[~alive, i + 1] = states[~alive, i]
    keep = np.flatnonzero(alive)
    fid = np.stack([batch_fidelity(states[keep, j], task.target) for j in range(n + 1)], axis=1)
    return Episodes(states[keep], prev[keep], acts[keep], fid, b - keep.size)


def surrogate_grad(policy: GaussianPolicy, ep: Episodes, R_hat: np.ndarray, chunk_rows: int = GRAD_CHUNK_ROWS) -> dict:
    """Gradient of mean_batch sum_{n<N} log pi(u_n) R_hat_n with respect to the mean network.

    States and actions are data here; the network is re-run on the stored inputs
    in row chunks to bound memory.
    """
    b, n = ep.actions.shape[:2]
    xs = ep.states[:, :n].reshape(b * n, -1)
    up = ep.prev_actions.reshape(b * n, -1)
    us = ep.actions.reshape(b * n, -1)
    w = (R_hat[:, :n] / b).reshape(b * n)
    grads = {k: np.zeros_like(v) for k, v in policy.params.arrays().items()}
    for lo in range(0, b * n, chunk_rows):
        sl = slice(lo, lo + chunk_rows)
        p = policy.params.traced()
        mu = forward(p, xs[sl], up[sl])
        obj = ad.dot(log_prob(us[sl], mu, policy.sigma2), w[sl])
        g = ad.backward(obj, p.tensors)
        for k in grads:
            grads[k] += g[k]
    return grads


def pg_epoch(
    policy: GaussianPolicy,
    adam: AdamState,
    task: TaskSpec,
    weights: LossWeights,
    batch: int,
    seed: int,
    epoch: int,
) -> tuple[GaussianPolicy, AdamState, dict]:
    """Sample a batch, estimate the policy gradient and take one Adam ascent step."""
    x0 = task.sample_batch(seed, STREAM_TRAIN, epoch, batch)
    noise = policy_noise(seed, epoch, batch, task.horizon.n_steps, task.num_controls)
    ep = sample_episodes(policy, task, x0, noise)
    if ep.aborted > math.floor(FAILURE_BUDGET * batch):
        raise TrainingError(f"{ep.aborted} of {batch} trajectories aborted in epoch {epoch}")
    R_hat = normalize(rewards_to_go(ep.fidelities, ep.actions, weights))
    grads = surrogate_grad(policy, ep, R_hat)
    arrays, adam = adam_step(policy.params.arrays(), grads, adam, ascend=True)
    f = ep.fidelities[:, 1:]
    sq = (ep.actions**2).sum(-1)
    disc = weights.gamma ** np.arange(1, f.shape[1] + 1)
    row = dict(
        epoch=epoch,
        mean_reward=float(episode_return(ep.fidelities, ep.actions, weights).mean()),
        loss_F=float(((1.0 - f) @ disc).mean()),
        loss_FN=float((1.0 - f[:, -1]).mean()),
        loss_amp=float(np.sqrt(sq).sum(-1).mean()),
        loss_amp_sq=float(sq.sum(-1).mean()),
        mean_final_infidelity=float(1.0 - f[:, -1].mean()),
        max_norm_drift=float(norm_drift(ep.states[:, -1]).max()),
        aborted=ep.aborted,
    )
    return GaussianPolicy(AgentParams(policy.params.arch, arrays), policy.sigma2), adam, row


def train_reinforce(
    config: TrainConfig,
    sigma2: float = DEFAULT_SIGMA2,
    params: AgentParams | None = None,
    callback: Callable | None = None,
) -> tuple[AgentParams, History]:
    """REINFORCE on ``config.task``; batch, epochs and lr come from the config.

    ``callback(epoch, params, row)`` runs after each update.
    """
    if params is None:
        params = init_params(config.arch, config.seed)
    policy = GaussianPolicy(params, sigma2)
    adam = AdamState.create(params.arrays(), config.lr)
    history = History()
    for epoch in range(1, config.epochs + 1):
        policy, adam, row = pg_epoch(policy, adam, config.task, config.weights, config.batch, config.seed, epoch)
        history.append(**row)
        if epoch == 1 or epoch % 50 == 0 or epoch == config.epochs:
            log.info("epoch %d mean reward %.6g final infidelity %.3e", epoch, row["mean_reward"], row["mean_final_infidelity"])
        if callback is not None:
            callback(epoch, policy.params, row)
    return policy.params, history
