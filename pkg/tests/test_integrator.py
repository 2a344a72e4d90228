import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from conftest import random_hermitian, random_state
from diffqc import autodiff as ad
from diffqc.integrator import (
    NonFiniteStateError,
    StepSpec,
    evolve_batch,
    evolve_interval,
    evolve_interval_stepwise,
    heun_step,
    norm_drift,
)
from diffqc.realspace import ControlSystem, DimensionError, RealHamiltonian, RealState, fidelity
from diffqc.systems import build_qubit


def test_stepspec_validation_and_horizon():
    s = StepSpec.from_table(150, 20, 0.01)
    assert s.horizon == pytest.approx(30.0) and s.interval == pytest.approx(0.2)
    assert len(s.times()) == 151
    i = StepSpec.from_table(150, 20, 0.01, mode="interval")
    assert i.dt == pytest.approx(0.0005) and i.horizon == pytest.approx(1.5)
    for bad in [(0, 1, 0.1), (1, 0, 0.1), (1, 1, 0.0)]:
        with pytest.raises(ValueError):
            StepSpec(*bad)
    with pytest.raises(ValueError):
        StepSpec.from_table(1, 1, 0.1, mode="bogus")


def test_heun_step_zero_field():
    s = np.array([0.3, -0.2])
    assert np.array_equal(heun_step(lambda v: np.zeros_like(v), s, 0.1), s)


def test_heun_step_linear_decay():
    # 1 + lam dt + lam^2 dt^2 / 2 with lam = -1, dt = 0.1
    assert heun_step(lambda y: -y, 1.0, 0.1) == pytest.approx(0.905, abs=1e-15)


def test_heun_local_error_is_third_order():
    h = RealHamiltonian(np.diag([1.0, -1.0]), np.zeros((2, 2)))
    M = h.generator()
    psi = np.array([1.0, 1.0]) / np.sqrt(2)
    x = RealState.from_complex(psi).stacked

    def err(dt):
        exact = np.exp(-1j * np.array([1.0, -1.0]) * dt) * psi
        got = heun_step(lambda v: M @ v, x, dt)
        return np.linalg.norm(got[:2] + 1j * got[2:] - exact)

    ratio = err(0.02) / err(0.01)
    assert ratio == pytest.approx(8.0, rel=0.05)


def test_drift_eigenstate_keeps_fidelity():
    q = build_qubit(1.0)
    up = RealState.basis(2, 0)
    out = evolve_interval(q, up, [0.0], 20, 0.01)
    # phase-only evolution; Heun multiplies |amplitude|^2 by 1 + theta^4/4 per substep
    theta = 0.5 * 0.01
    assert fidelity(out, up) == pytest.approx((1 + theta**4 / 4) ** 20, abs=1e-14)


def test_rabi_flip():
    sx = RealHamiltonian(np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros((2, 2)))
    q = ControlSystem(RealHamiltonian(np.zeros((2, 2)), np.zeros((2, 2))), (sx,))  # omega = 0
    n_sub, dt = 1000, 0.001
    u = (np.pi / 2) / (n_sub * dt)
    out = evolve_interval(q, RealState.basis(2, 0), [u], n_sub, dt)
    assert fidelity(out, RealState.basis(2, 1)) == pytest.approx(1.0, abs=1e-4)


def test_norm_drift_per_substep_small(rng):
    H = random_hermitian(rng, 4)
    H /= np.linalg.norm(H, 2)  # unit-scale spectrum
    sys_ = ControlSystem(RealHamiltonian.from_complex(H), (RealHamiltonian(np.eye(4), np.zeros((4, 4))),))
    s = RealState.from_complex(random_state(rng, 4))
    out = evolve_interval(sys_, s, [0.0], 1, 0.001)
    assert norm_drift(out.stacked) < 1e-8


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_composition(seed, a, b):
    rng = np.random.default_rng(seed)
    sys_ = ControlSystem(RealHamiltonian.from_complex(random_hermitian(rng, 3)), (RealHamiltonian.from_complex(random_hermitian(rng, 3)),))
    s = RealState.from_complex(random_state(rng, 3))
    u = rng.normal(size=1)
    two = evolve_interval(sys_, evolve_interval(sys_, s, u, a, 0.01), u, b, 0.01)
    one = evolve_interval(sys_, s, u, a + b, 0.01)
    assert np.allclose(two.stacked, one.stacked, atol=1e-13)


def test_batch_matches_stepwise_reference(rng):
    q = build_qubit(1.3)
    s = RealState.from_complex(random_state(rng, 2))
    ref = evolve_interval_stepwise(q, s, [0.7], 20, 0.01)
    got = evolve_interval(q, s, [0.7], 20, 0.01)
    assert np.allclose(got.stacked, ref, atol=1e-14)


def test_second_order_global_convergence():
    q = build_qubit(1.0)
    psi = np.array([np.cos(0.4), np.sin(0.4) * np.exp(0.3j)])
    T = 30.0
    exact = expm(-1j * T * np.diag([0.5, -0.5])) @ psi

    def err(dt):
        n = int(round(T / dt))
        x = RealState.from_complex(psi).stacked[None, :]
        out = evolve_batch(q, x, np.zeros((1, 1)), n, dt)[0]
        return np.linalg.norm(out[:2] + 1j * out[2:] - exact)

    assert err(0.005) / err(0.0025) == pytest.approx(4.0, rel=0.05)


def test_shape_errors():
    q = build_qubit(1.0)
    with pytest.raises(DimensionError):
        evolve_batch(q, np.zeros((1, 3)), np.zeros((1, 1)), 1, 0.1)
    with pytest.raises(DimensionError):
        evolve_batch(q, np.zeros((2, 4)), np.zeros((1, 1)), 1, 0.1)


def test_non_finite_rows_reported():
    q = build_qubit(1.0)
    x = np.tile(RealState.basis(2, 0).stacked, (3, 1))
    u = np.array([[0.0], [1e200], [0.0]])
    with pytest.raises(NonFiniteStateError) as exc:
        evolve_batch(q, x, u, 5, 0.1)
    assert exc.value.rows.tolist() == [1]


def test_evolve_batch_gradients_match_finite_differences(rng):
    sys_ = ControlSystem(
        RealHamiltonian.from_complex(random_hermitian(rng, 2)),
        tuple(RealHamiltonian.from_complex(random_hermitian(rng, 2)) for _ in range(2)),
    )
    x0 = np.stack([RealState.from_complex(random_state(rng, 2)).stacked for _ in range(3)])
    u0 = rng.normal(size=(3, 2))
    w = rng.normal(size=(3, 4))

    def f(p):
        return ad.sum(ad.mul(evolve_batch(sys_, p["x"], p["u"], 7, 0.05), w))

    assert ad.grad_check(f, {"x": x0, "u": u0}, eps=1e-5) < 1e-7
