import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safe_rta import autodiff as ad
from safe_rta.backup import LinearFeedbackBackup, StationKeepingBackup, ZeroBackup
from safe_rta.dynamics import (
    ControlAffineDynamics,
    CwParams,
    DynamicsError,
    closed_loop_field,
    closed_loop_jacobian,
    cw_matrices,
    cw_system,
)

from oracles import best_relative_error, cw_ab, fd_gradient_sweep, zoh

N_MEAN = 0.001027
MASS = 12.0


def cw1():
    return cw_system(CwParams(N_MEAN, MASS, 1, 0))


def double_integrator():
    return ControlAffineDynamics(
        n=2, m_ctrl=1, f=lambda x: ad.stack([x[..., 1], 0.0 * x[..., 0]], axis=-1), g=lambda x: np.array([[0.0], [1.0]])
    )


def test_cw_equilibrium():
    assert np.array_equal(cw1().state_derivative(np.zeros(6), np.zeros(3)), np.zeros(6))


def test_cw_drift_term():
    xd = cw1().state_derivative(np.array([1.0, 0, 0, 0, 0, 0]), np.zeros(3))
    np.testing.assert_allclose(xd, [0, 0, 0, 3 * N_MEAN**2, 0, 0], rtol=1e-15, atol=0)
    assert xd[3] == pytest.approx(3.164e-6, rel=1e-3)


def test_cw_thrust_term():
    xd = cw1().state_derivative(np.zeros(6), np.array([1.0, 0, 0]))
    np.testing.assert_allclose(xd, [0, 0, 0, 1 / 12, 0, 0], rtol=1e-15, atol=0)


def test_cw_matrices_entries():
    A, B = cw_matrices(N_MEAN, MASS)
    Ao, Bo = cw_ab(N_MEAN, MASS)
    assert np.array_equal(A, Ao) and np.array_equal(B, Bo)
    assert A[3, 0] == 3 * N_MEAN * N_MEAN and A[3, 4] == 2 * N_MEAN and A[4, 3] == -2 * N_MEAN and A[5, 2] == -N_MEAN * N_MEAN
    assert B[3, 0] == B[4, 1] == B[5, 2] == 1 / MASS


def test_stacked_structure():
    dyn = cw_system(CwParams(N_MEAN, MASS, 2, 0))
    assert dyn.n == 12 and dyn.m_ctrl == 3
    assert np.array_equal(dyn.g(np.zeros(12))[6:], np.zeros((6, 3)))
    dyn3 = cw_system(CwParams(N_MEAN, MASS, 3, 1))
    A, _ = cw_matrices(N_MEAN, MASS)
    x = np.random.default_rng(0).normal(size=18)
    np.testing.assert_allclose(dyn3.f(x), np.concatenate([A @ x[0:6], A @ x[6:12], A @ x[12:18]]), rtol=1e-14)
    # the dual path of f is written out separately; it must give the same values
    np.testing.assert_allclose(ad.jacobian(dyn3.f, x), np.kron(np.eye(3), A), rtol=0, atol=0)


def test_controlled_index_out_of_range():
    with pytest.raises(DynamicsError):
        CwParams(N_MEAN, MASS, 2, 2)
    with pytest.raises(DynamicsError):
        CwParams(-1.0, MASS)
    with pytest.raises(DynamicsError):
        CwParams(N_MEAN, MASS, 0, 0)


@given(
    arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 3, elements=st.floats(-1, 1)),
    arrays(np.float64, 3, elements=st.floats(-1, 1)),
    st.floats(0, 1),
)
def test_state_derivative_is_affine_in_u(x, u1, u2, a):
    dyn = cw1()
    lhs = dyn.state_derivative(x, a * u1 + (1 - a) * u2)
    rhs = a * dyn.state_derivative(x, u1) + (1 - a) * dyn.state_derivative(x, u2)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_propagate_zero_is_fixed_point():
    assert np.array_equal(cw1().propagate(np.zeros(6), np.zeros(3), 7.0), np.zeros(6))


def test_propagate_matches_exact_solution():
    A, B = cw_ab(N_MEAN, MASS)
    rng = np.random.default_rng(5)
    for dt in (0.5, 1.0, 3.0, 10.0):
        Ad, Bd = zoh(A, B, dt)
        x = np.concatenate([rng.uniform(-500, 500, 3), rng.uniform(-1, 1, 3)])
        for u in (np.zeros(3), rng.uniform(-1, 1, 3)):
            exact = Ad @ x + Bd @ u
            got = cw1().propagate(x, u, dt)
            assert np.linalg.norm(got - exact) <= 1e-8 * np.linalg.norm(exact)


def test_double_integrator_kinematics():
    out = double_integrator().propagate(np.zeros(2), np.array([1.0]), 2.0)
    np.testing.assert_allclose(out, [2.0, 2.0], atol=1e-9)


def test_substep_consistency():
    dyn = cw1()
    x = np.array([300.0, -200.0, 50.0, 0.3, -0.1, 0.2])
    u = np.array([0.4, -0.2, 0.9])
    once = dyn.propagate(x, u, 4.0)
    split = x
    for _ in range(4):
        split = dyn.propagate(split, u, 1.0)
    assert np.linalg.norm(once - split) <= 1e-6 * np.linalg.norm(once)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_propagate_errors():
    dyn = cw1()
    with pytest.raises(DynamicsError):
        dyn.propagate(np.zeros(5), np.zeros(3), 1.0)
    with pytest.raises(DynamicsError):
        dyn.propagate(np.zeros(6), np.zeros(2), 1.0)
    with pytest.raises(DynamicsError):
        dyn.propagate(np.zeros(6), np.zeros(3), 0.0)
    with pytest.raises(DynamicsError):
        dyn.propagate(np.full(6, 1e308), np.zeros(3), 1.0)


def test_external_propagator_hook():
    calls = []

    def external(x, u, dt):
        calls.append(dt)
        return x + dt

    dyn = cw1().with_propagator(external)
    np.testing.assert_array_equal(dyn.propagate(np.zeros(6), np.zeros(3), 2.0), np.full(6, 2.0))
    assert calls == [2.0]


def test_closed_loop_jacobian_zero_backup():
    dyn = cw_system(CwParams(N_MEAN, MASS, 2, 1))
    A, _ = cw_matrices(N_MEAN, MASS)
    J = closed_loop_jacobian(dyn, ZeroBackup(3), np.random.default_rng(0).normal(size=12))
    np.testing.assert_array_equal(J, np.kron(np.eye(2), A))


def test_closed_loop_jacobian_linear_backup():
    A, B = cw_matrices(N_MEAN, MASS)
    K = np.random.default_rng(1).normal(size=(3, 6)) * 1e-2
    ctrl = LinearFeedbackBackup(K, -1e9 * np.ones(3), 1e9 * np.ones(3))
    J = closed_loop_jacobian(cw1(), ctrl, np.array([10.0, 5, -3, 0.1, 0.2, 0.3]))
    np.testing.assert_allclose(J, A - B @ K, rtol=1e-15, atol=1e-18)


def test_closed_loop_jacobian_against_finite_differences():
    A, B = cw_matrices(N_MEAN, MASS)
    from safe_rta.backup import dlqr

    K = dlqr(A, B, np.eye(6), 1e3 * np.eye(3), 1.0)
    dyn = cw_system(CwParams(N_MEAN, MASS, 2, 0))
    ctrl = StationKeepingBackup(K, N_MEAN, MASS, 1.0, 0)
    ctrl.internal_state["setpoint"] = np.array([150.0, -40.0, 20.0])
    rng = np.random.default_rng(6)
    for _ in range(30):
        x = np.concatenate([rng.uniform(100, 200, 3), rng.uniform(-0.3, 0.3, 3), rng.uniform(-500, 500, 6)])
        J = closed_loop_jacobian(dyn, ctrl, x)
        fd = fd_gradient_sweep(closed_loop_field(dyn, ctrl), x)
        assert best_relative_error(J, fd) <= 1e-6


def test_cw_exact_solution_long_horizon():
    # drift only, 500 s in 1 s steps against exp(A t)
    A, _ = cw_ab(N_MEAN, MASS)
    x0 = np.array([100.0, 0.0, 30.0, 0.0, -0.2, 0.0])
    x = x0
    for _ in range(500):
        x = cw1().propagate(x, np.zeros(3), 1.0)
    exact = scipy.linalg.expm(A * 500.0) @ x0
    assert np.linalg.norm(x - exact) <= 1e-8 * np.linalg.norm(exact)
