"""Physical systems: a single qubit, an Ising spin chain and a Kerr parametric oscillator.

Spin basis ordering: index 0 is all spins up, index D-1 all spins down, site 1 is
the most significant bit and a down spin is a set bit.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .integrator import StepSpec
from .realspace import ControlSystem, RealHamiltonian, RealState

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)

MAX_CHAIN = 6
KINDS = ("qubit", "spin_chain", "parametron")


def build_qubit(omega: float = 1.0) -> ControlSystem:
    """omega/2 sigma_z drift, sigma_x control; basis (up, down)."""
    if not omega > 0:
        raise ValueError("qubit frequency must be positive")
    return ControlSystem(
        RealHamiltonian.from_complex(0.5 * omega * SIGMA_Z),
        [RealHamiltonian.from_complex(SIGMA_X)],
        name="qubit",
    )


def site_operator(op: np.ndarray, site: int, M: int) -> np.ndarray:
    """op acting on site ``site`` (0-based, leftmost factor is site 0) of an M-site chain."""
    out = np.eye(1, dtype=np.complex128)
    for i in range(M):
        out = np.kron(out, op if i == site else np.eye(2))
    return out


def build_spin_chain(M: int, J: float = 1.0) -> ControlSystem:
    """Open Ising chain J sum_i sz_i sz_{i+1} with sigma_x and sigma_y controls on every site.

    Controls are ordered (x_1, y_1, x_2, y_2, ...).
    """
    if not 2 <= M <= MAX_CHAIN:
        raise ValueError(f"chain length must lie in [2, {MAX_CHAIN}], got {M}")
    if not J > 0:
        raise ValueError("coupling J must be positive")
    D = 2**M
    drift = np.zeros((D, D), dtype=np.complex128)
    for i in range(M - 1):
        drift += J * site_operator(SIGMA_Z, i, M) @ site_operator(SIGMA_Z, i + 1, M)
    controls = []
    for i in range(M):
        controls.append(RealHamiltonian.from_complex(site_operator(SIGMA_X, i, M)))
        controls.append(RealHamiltonian.from_complex(site_operator(SIGMA_Y, i, M)))
    return ControlSystem(RealHamiltonian.from_complex(drift), controls, name=f"spin_chain_M{M}")


def annihilation(D: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, D, dtype=np.float64)), k=1)


def build_parametron(U: float = 1.0, G: float | None = None, D: int = 16, two_quadratures: bool = False) -> ControlSystem:
    """U a+a+aa + G(a+a+ + aa) + u (a + a+) in the Fock basis |0>..|D-1>.

    ``two_quadratures`` adds i(a - a+) as a second control operator.
    """
    if D < 8:
        raise ValueError("Fock truncation D must be at least 8")
    if G is None:
        G = -4.0 * U
    a = annihilation(D)
    ad_ = a.T
    drift = U * ad_ @ ad_ @ a @ a + G * (ad_ @ ad_ + a @ a)
    controls = [RealHamiltonian(a + ad_, np.zeros((D, D)))]
    if two_quadratures:
        controls.append(RealHamiltonian.from_complex(1j * (a - ad_)))
    return ControlSystem(RealHamiltonian(drift, np.zeros((D, D))), controls, name="parametron")


# -- states -------------------------------------------------------------------

def spin_index(spins_down) -> int:
    """Basis index of a configuration given as a sequence of 0 (up) / 1 (down), site 1 first."""
    idx = 0
    for bit in spins_down:
        idx = (idx << 1) | int(bit)
    return idx


def neel_indices(M: int) -> tuple[int, int]:
    first = spin_index([i % 2 for i in range(M)])
    return first, (2**M - 1) ^ first


def ghz_state(M: int) -> RealState:
    if M < 2:
        raise ValueError("GHZ state needs M >= 2")
    D = 2**M
    re = np.zeros(D)
    re[0] = re[-1] = 1.0 / math.sqrt(2.0)
    return RealState(re, np.zeros(D))


def coherent_amplitudes(alpha: complex, D: int) -> np.ndarray:
    n = np.arange(D)
    log_fact = np.array([math.lgamma(k + 1) for k in n])
    alpha = complex(alpha)
    mag = np.exp(-0.5 * abs(alpha) ** 2 + n * math.log(abs(alpha)) - 0.5 * log_fact) if alpha != 0 else (n == 0) * 1.0
    return mag * np.exp(1j * n * np.angle(alpha))


def cat_state(alpha: complex = 2.0, D: int = 16, tail_tol: float = 1e-6) -> RealState:
    """(|alpha> + |-alpha>)/sqrt2 truncated to D Fock states and renormalized."""
    c = (coherent_amplitudes(alpha, D) + coherent_amplitudes(-alpha, D)) / math.sqrt(2.0)
    c[1::2] = 0.0
    # untruncated norm^2 of the cat is 1 + exp(-2|alpha|^2)
    tail = 1.0 - float(np.sum(np.abs(c) ** 2)) / (1.0 + math.exp(-2.0 * abs(alpha) ** 2))
    if tail > tail_tol:
        warnings.warn(f"cat state truncated at D={D} loses probability {tail:.2e}", RuntimeWarning, stacklevel=2)
    return RealState.from_complex(c)


def drift_eigenstate(system: ControlSystem, k: int) -> RealState:
    """k-th eigenvector of the drift (ascending energy), phase fixed so the largest entry is real positive."""
    if not 0 <= k < system.dim:
        raise ValueError(f"eigenstate index {k} outside [0, {system.dim})")
    _, vecs = np.linalg.eigh(system.drift.to_complex())
    v = vecs[:, k]
    j = int(np.argmax(np.abs(v)))
    v = v * np.exp(-1j * np.angle(v[j]))
    return RealState.from_complex(v)


def drift_spectrum(system: ControlSystem) -> np.ndarray:
    return np.linalg.eigvalsh(system.drift.to_complex())


def mean_photon_number(s: RealState) -> float:
    n = np.arange(s.dim)
    return float(np.sum(n * (s.re**2 + s.im**2)))


# -- noisy initial states -----------------------------------------------------

def sample_bloch_uniform(rng: np.random.Generator) -> RealState:
    """cos(theta/2)|up> + sin(theta/2) e^{i phi}|down> with the direction uniform on the sphere."""
    cos_theta = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return bloch_state(math.acos(cos_theta), phi)


def bloch_state(theta: float, phi: float) -> RealState:
    c, s = math.cos(0.5 * theta), math.sin(0.5 * theta)
    return RealState([c, s * math.cos(phi)], [0.0, s * math.sin(phi)])


def sample_neel_noisy(M: int, p: float, rng: np.random.Generator, mode: str = "per_site") -> RealState:
    """One of the two Neel states (probability 1/2 each) with spin-flip noise.

    ``per_site`` flips every site independently with probability p; ``single``
    flips one uniformly chosen site with probability p.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("flip probability must lie in [0, 1)")
    first, second = neel_indices(M)
    idx = first if rng.random() < 0.5 else second
    if mode == "per_site":
        flips = rng.random(M) < p
        for site in np.flatnonzero(flips):
            idx ^= 1 << (M - 1 - site)
    elif mode == "single":
        if rng.random() < p:
            idx ^= 1 << (M - 1 - int(rng.integers(M)))
    else:
        raise ValueError(f"unknown flip mode {mode!r}")
    return RealState.basis(2**M, idx)


def sample_noisy_vacuum(D: int, xi: float, rng: np.random.Generator) -> RealState:
    """|0> + sum_n exp(-n/3) xi_n |n> with real xi_n ~ U[-xi, xi], then normalized."""
    if xi < 0:
        raise ValueError("noise half-width must be non-negative")
    n = np.arange(D)
    c = np.zeros(D)
    c[0] = 1.0
    if xi > 0:
        c = c + np.exp(-n / 3.0) * rng.uniform(-xi, xi, size=D)
    return RealState(c, np.zeros(D))


# -- tasks ---------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    kind: str
    params: Mapping
    system: ControlSystem = field(compare=False)
    target: RealState = field(compare=False)
    horizon: StepSpec

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def num_controls(self) -> int:
        return self.system.num_controls

    def sample_initial(self, rng: np.random.Generator) -> RealState:
        p = self.params
        if self.kind == "qubit":
            return sample_bloch_uniform(rng)
        if self.kind == "spin_chain":
            return sample_neel_noisy(p["M"], p["flip_p"], rng, p.get("flip_mode", "per_site"))
        return sample_noisy_vacuum(p["D"], p["xi"], rng)

    def sample_batch(self, seed: int, stream: int, epoch: int, count: int) -> np.ndarray:
        """Stacked initial states (count, 2D); sample r depends only on (seed, stream, epoch, r)."""
        out = np.empty((count, 2 * self.dim))
        for r in range(count):
            rng = np.random.default_rng([seed, stream, epoch, r])
            out[r] = self.sample_initial(rng).stacked
        return out


def make_task(kind: str, params: Mapping, horizon: StepSpec) -> TaskSpec:
    params = dict(params)
    if kind == "qubit":
        params.setdefault("omega", 1.0)
        system = build_qubit(params["omega"])
        target = RealState.basis(2, 0)
    elif kind == "spin_chain":
        params.setdefault("J", 1.0)
        params.setdefault("flip_p", 0.1)
        params.setdefault("flip_mode", "per_site")
        system = build_spin_chain(params["M"], params["J"])
        target = ghz_state(params["M"])
    elif kind == "parametron":
        params.setdefault("U", 1.0)
        params.setdefault("G", -4.0 * params["U"])
        params.setdefault("D", 16)
        params.setdefault("xi", 0.4)
        params.setdefault("alpha", 2.0)
        params.setdefault("two_quadratures", False)
        if params["xi"] < 0:
            raise ValueError("xi must be non-negative")
        system = build_parametron(params["U"], params["G"], params["D"], params["two_quadratures"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            target = cat_state(params["alpha"], params["D"])
    else:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    return TaskSpec(kind, params, system, target, horizon)
