"""Elementary loss terms and their weighted sum.

All functions accept arrays or tape Tensors and reduce over the trailing step
axis, so a batch of trajectories (b, N) gives one value per trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FIDELITY_SLACK = 1e-9


class IntegratorDriftError(ValueError):
    """A fidelity left [0, 1]: the integrator has drifted off the unit sphere."""


@dataclass(frozen=True)
class LossWeights:
    c_F: float = 0.0
    c_FN: float = 0.0
    c_amp: float = 0.0
    c_amp_sq: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        coeffs = (self.c_F, self.c_FN, self.c_amp, self.c_amp_sq)
        if any(c < 0 for c in coeffs):
            raise ValueError("loss coefficients must be non-negative")
        if not any(c > 0 for c in coeffs):
            raise ValueError("at least one loss coefficient must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("discount gamma must lie in (0, 1]")


@dataclass
class LossParts:
    F: object
    FN: object
    amp: object
    amp_sq: object


def _check_fidelities(fid) -> None:
    v = ad.value(fid)
    if v.size and (v.min() < -FIDELITY_SLACK or v.max() > 1.0 + FIDELITY_SLACK):
        raise IntegratorDriftError(f"fidelity outside [0, 1]: range [{v.min():.3g}, {v.max():.3g}]")


def discounts(n: int, gamma: float) -> np.ndarray:
    """gamma^1 .. gamma^n."""
    return gamma ** np.arange(1, n + 1, dtype=np.float64)


def loss_F(fidelities, gamma: float = 1.0, check: bool = True):
    """sum_{i=1..N} gamma^i (1 - F_i) over the last axis."""
    if check:
        _check_fidelities(fidelities)
    n = ad.value(fidelities).shape[-1]
    return ad.dot(ad.sub(1.0, fidelities), discounts(n, gamma))


def loss_FN(final_fidelity, check: bool = True):
    if check:
        _check_fidelities(final_fidelity)
    return ad.sub(1.0, final_fidelity)


def loss_amp(actions, squared: bool = False):
    """sum_i |u_i| (Euclidean norm per step) or sum_i |u_i|^2 for actions (..., N, K)."""
    sq = ad.sum(ad.square(actions), axis=-1)
    if squared:
        return ad.sum(sq, axis=-1)
    return ad.sum(ad.sqrt(sq), axis=-1)


def loss_parts(fidelities, actions, gamma: float = 1.0, check: bool = True) -> LossParts:
    """All four terms for fidelities (..., N) and actions (..., N, K).

    Rollouts pass ``check=False``: Heun states are not exactly normalized, so a
    fidelity may exceed 1 by the integrator's norm drift, which is monitored
    separately.
    """
    fin = ad.take(fidelities, (Ellipsis, -1))
    return LossParts(
        F=loss_F(fidelities, gamma, check),
        FN=loss_FN(fin, check),
        amp=loss_amp(actions),
        amp_sq=loss_amp(actions, squared=True),
    )


def total_loss(weights: LossWeights, parts: LossParts):
    """c_F L_F + c_FN L_FN + c_amp L_amp + c_amp_sq L'_amp; zero-weight terms are left off the tape."""
    terms = [
        (weights.c_F, parts.F),
        (weights.c_FN, parts.FN),
        (weights.c_amp, parts.amp),
        (weights.c_amp_sq, parts.amp_sq),
    ]
    total = None
    for c, term in terms:
        if c == 0.0:
            continue
        piece = ad.scale(term, c)
        total = piece if total is None else ad.add(total, piece)
    return total
