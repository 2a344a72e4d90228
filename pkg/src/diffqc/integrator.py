"""Fixed-step Heun integration with piecewise-constant controls."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from . import autodiff as ad
from .realspace import ControlSystem, DimensionError, RealState, assemble


class NonFiniteStateError(FloatingPointError):
    """Integration produced inf or nan; ``rows`` lists the affected trajectories."""

    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = np.asarray(rows, dtype=int)


DT_MODES = ("substep", "interval")


@dataclass(frozen=True)
class StepSpec:
    """N control intervals of N_sub Heun substeps of size dt each."""

    n_steps: int
    n_sub: int
    dt: float

    def __post_init__(self):
        if self.n_steps < 1 or self.n_sub < 1:
            raise ValueError("n_steps and n_sub must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_table(cls, n_steps: int, n_sub: int, dt: float, mode: str = "substep") -> "StepSpec":
        """Build from a (N, N_sub, dt) triple; ``mode="interval"`` reads dt as the interval length."""
        if mode not in DT_MODES:
            raise ValueError(f"dt mode must be one of {DT_MODES}, got {mode!r}")
        sub_dt = dt if mode == "substep" else dt / n_sub
        return cls(int(n_steps), int(n_sub), float(sub_dt))

    @property
    def interval(self) -> float:
        return self.n_sub * self.dt

    @property
    def horizon(self) -> float:
        return self.n_steps * self.n_sub * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.interval


def heun_step(deriv: Callable, s, dt: float):
    """One step of Heun's method: s + dt/2 (k1 + k2)."""
    k1 = deriv(s)
    k2 = deriv(s + dt * k1)
    return s + 0.5 * dt * (k1 + k2)


def evolve_batch(system: ControlSystem, x, u, n_sub: int, dt: float):
    """Advance stacked states x (b, 2D) under controls u (b, K) for one interval.

    Works on plain arrays or tape Tensors; the returned value is recorded on the
    tape with gradients flowing to both x and u.  Raises NonFiniteStateError
    naming the offending rows if any state blows up.
    """
    xv = ad.value(x)
    uv = ad.value(u)
    if xv.ndim != 2 or xv.shape[1] != 2 * system.dim:
        raise DimensionError(f"expected states of shape (b, {2 * system.dim}), got {xv.shape}")
    if uv.shape != (xv.shape[0], system.num_controls):
        raise DimensionError(f"expected controls of shape ({xv.shape[0]}, {system.num_controls}), got {uv.shape}")
    M = system.generators(uv)
    out = _kernels.heun_interval(M, xv, n_sub, dt)
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        rows = np.flatnonzero(bad)
        raise NonFiniteStateError(f"non-finite state in trajectories {rows.tolist()}", rows)

    def vjp(g):
        g_x, g_M = _kernels.heun_interval_vjp(M, xv, g, n_sub, dt)
        n = M.shape[-1]
        K = system.num_controls
        g_u = g_M.reshape(g_M.shape[0], n * n) @ system.control_generators.reshape(K, n * n).T
        return g_x, g_u

    return ad.custom(out, (x, u), vjp)


def evolve_interval(system: ControlSystem, s: RealState, u, n_sub: int, dt: float) -> RealState:
    """One control interval for a single state; the result is not renormalized."""
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    out = evolve_batch(system, s.stacked[None, :], u, n_sub, dt)[0]
    d = system.dim
    # Heun does not conserve the norm exactly; the drift is monitored, not hidden.
    return RealState.unnormalized(out[:d], out[d:])


def evolve_interval_stepwise(system: ControlSystem, s: RealState, u, n_sub: int, dt: float) -> np.ndarray:
    """Reference path: explicit heun_step calls with the assembled generator; returns the stacked state."""
    M = assemble(system, u).generator()
    x = s.stacked
    for _ in range(n_sub):
        x = heun_step(lambda v: M @ v, x, dt)
    return x


def norm_drift(x) -> np.ndarray:
    """| |x| - 1 | for stacked states along the last axis."""
    x = np.asarray(x)
    return np.abs(np.sqrt((x * x).sum(axis=-1)) - 1.0)
