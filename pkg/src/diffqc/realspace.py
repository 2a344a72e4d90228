"""States and Hermitian operators over the real isomorphism of the Schroedinger equation.

A complex state psi in C^D is stored as two real vectors (re, im).  Multiplying by
-iH becomes the real 2D x 2D block matrix

    [[ H_im,  H_re],
     [-H_re,  H_im]]

acting on the stacked vector [re; im].  That block matrix is antisymmetric whenever
H is Hermitian, which is why the exact flow preserves the norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Operands do not share the same Hilbert-space dimension."""


HERMITIAN_TOL = 1e-12


@dataclass(frozen=True)
class RealState:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.array(self.re, dtype=np.float64).reshape(-1)
        im = np.array(self.im, dtype=np.float64).reshape(-1)
        if re.shape != im.shape:
            raise DimensionError(f"re has length {re.size}, im has length {im.size}")
        norm = np.sqrt(re @ re + im @ im)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError("state has zero or non-finite norm")
        if abs(norm - 1.0) > 1e-12:
            re = re / norm
            im = im / norm
        re.flags.writeable = False
        im.flags.writeable = False
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @property
    def dim(self) -> int:
        return self.re.size

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.re, self.im])

    @classmethod
    def from_complex(cls, psi) -> "RealState":
        psi = np.asarray(psi, dtype=np.complex128)
        return cls(psi.real, psi.imag)

    @classmethod
    def from_stacked(cls, x) -> "RealState":
        x = np.asarray(x, dtype=np.float64)
        d = x.size // 2
        return cls(x[:d], x[d:])

    @classmethod
    def basis(cls, dim: int, index: int) -> "RealState":
        re = np.zeros(dim)
        re[index] = 1.0
        return cls(re, np.zeros(dim))

    @classmethod
    def unnormalized(cls, re, im) -> "RealState":
        """Wrap propagated coefficients as they are, without renormalizing."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "re", np.array(re, dtype=np.float64).reshape(-1))
        object.__setattr__(obj, "im", np.array(im, dtype=np.float64).reshape(-1))
        return obj

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im


@dataclass(frozen=True)
class RealHamiltonian:
    h_re: np.ndarray
    h_im: np.ndarray

    def __post_init__(self):
        h_re = np.array(self.h_re, dtype=np.float64)
        h_im = np.array(self.h_im, dtype=np.float64)
        if h_re.ndim != 2 or h_re.shape[0] != h_re.shape[1] or h_re.shape != h_im.shape:
            raise DimensionError(f"bad operator shapes {h_re.shape} / {h_im.shape}")
        h_re.flags.writeable = False
        h_im.flags.writeable = False
        object.__setattr__(self, "h_re", h_re)
        object.__setattr__(self, "h_im", h_im)

    @property
    def dim(self) -> int:
        return self.h_re.shape[0]

    @classmethod
    def from_complex(cls, h) -> "RealHamiltonian":
        h = np.asarray(h, dtype=np.complex128)
        return cls(h.real, h.imag)

    def to_complex(self) -> np.ndarray:
        return self.h_re + 1j * self.h_im

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        scale = max(1.0, float(np.abs(self.h_re).max(initial=0.0)), float(np.abs(self.h_im).max(initial=0.0)))
        return bool(
            np.abs(self.h_re - self.h_re.T).max(initial=0.0) <= tol * scale
            and np.abs(self.h_im + self.h_im.T).max(initial=0.0) <= tol * scale
        )

    def generator(self) -> np.ndarray:
        """Block matrix of -iH acting on [re; im]."""
        return np.block([[self.h_im, self.h_re], [-self.h_re, self.h_im]])


@dataclass(frozen=True)
class ControlSystem:
    """Drift operator H_0 plus K control operators H_k."""

    drift: RealHamiltonian
    controls: tuple
    name: str = field(default="", compare=False)

    def __post_init__(self):
        controls = tuple(self.controls)
        object.__setattr__(self, "controls", controls)
        if not controls:
            raise ValueError("a control system needs at least one control operator")
        for k, op in enumerate((self.drift,) + controls):
            if op.dim != self.drift.dim:
                raise DimensionError(f"operator {k} has dimension {op.dim}, drift has {self.drift.dim}")
            if not op.is_hermitian():
                raise ValueError(f"operator {k} is not Hermitian")

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def num_controls(self) -> int:
        return len(self.controls)

    @cached_property
    def drift_generator(self) -> np.ndarray:
        return self.drift.generator()

    @cached_property
    def control_generators(self) -> np.ndarray:
        """Array of shape (K, 2D, 2D)."""
        return np.stack([op.generator() for op in self.controls])

    def generators(self, u: np.ndarray) -> np.ndarray:
        """Block generators for a batch of control vectors u of shape (b, K) -> (b, 2D, 2D)."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.num_controls:
            raise DimensionError(f"expected {self.num_controls} controls, got {u.shape[-1]}")
        n = 2 * self.dim
        flat = self.control_generators.reshape(self.num_controls, n * n)
        return self.drift_generator + (u @ flat).reshape(u.shape[:-1] + (n, n))


def _as_vector(u, k: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size != k:
        raise DimensionError(f"expected {k} control amplitudes, got {u.size}")
    return u


def assemble(system: ControlSystem, u: Sequence[float]) -> RealHamiltonian:
    """H_0 + sum_k u_k H_k."""
    u = _as_vector(u, system.num_controls)
    h_re = system.drift.h_re.copy()
    h_im = system.drift.h_im.copy()
    for uk, op in zip(u, system.controls):
        h_re += uk * op.h_re
        h_im += uk * op.h_im
    return RealHamiltonian(h_re, h_im)


def generator_apply(h: RealHamiltonian, s: RealState) -> tuple[np.ndarray, np.ndarray]:
    """Realified -iH psi, returned as (d_re, d_im)."""
    if h.dim != s.dim:
        raise DimensionError(f"operator dimension {h.dim} != state dimension {s.dim}")
    d_re = h.h_im @ s.re + h.h_re @ s.im
    d_im = -h.h_re @ s.re + h.h_im @ s.im
    return d_re, d_im


def fidelity(s: RealState, target: RealState) -> float:
    """|<s|target>|^2."""
    if s.dim != target.dim:
        raise DimensionError(f"state dimensions differ: {s.dim} vs {target.dim}")
    ov_re = s.re @ target.re + s.im @ target.im
    ov_im = s.re @ target.im - s.im @ target.re
    return float(ov_re * ov_re + ov_im * ov_im)


def overlap_matrix(target: RealState) -> np.ndarray:
    """(2D, 2) matrix whose product with a stacked state gives (Re, Im) of <s|target>."""
    return np.stack(
        [np.concatenate([target.re, target.im]), np.concatenate([target.im, -target.re])],
        axis=1,
    )


def batch_fidelity(x: np.ndarray, target: RealState) -> np.ndarray:
    """Fidelities of stacked states x[..., 2D] with the target."""
    ov = np.asarray(x) @ overlap_matrix(target)
    return (ov * ov).sum(axis=-1)
