"""Dynamics tests.

Oracles: a fine-substep integrator for the RK4 step and central finite
differences for the exact step Jacobians.  Random states are drawn from the
parking operating envelope (|v| <= 1 m/s, |delta| <= delta_max) where the
single-step tolerances are meaningful.
"""

import math

import numpy as np
import pytest

from tightnav.dynamics import (
    VehicleInput,
    VehicleParams,
    VehicleState,
    continuous_derivative,
    rollout,
    slip_angle,
    step_jacobians,
    step_rk4,
    wrap_angle,
)

PARAMS = VehicleParams()
DT = 0.1


def fine_step(z, u, dt, params, substeps=1000):
    """Oracle integrator: RK4 with dt/substeps resolution."""
    h = dt / substeps
    out = z.copy()
    for _ in range(substeps):
        out = step_rk4(out, u, h, params)
    return out


def fd_jacobians(z, u, dt, params, h=1e-6):
    """Oracle Jacobians by central differences."""
    jz = np.zeros((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        jz[:, i] = (step_rk4(z + e, u, dt, params) - step_rk4(z - e, u, dt, params)) / (2 * h)
    ju = np.zeros((4, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        ju[:, i] = (step_rk4(z, u + e, dt, params) - step_rk4(z, u - e, dt, params)) / (2 * h)
    return jz, ju


def sample_envelope(rng):
    z = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2),
                  rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])
    u = np.array([rng.uniform(-PARAMS.delta_max, PARAMS.delta_max),
                  rng.uniform(-PARAMS.a_max, PARAMS.a_max)])
    return z, u


def test_straight_line_exact():
    z = np.array([0.0, 0.0, 0.0, 1.0])
    u = np.zeros(2)
    np.testing.assert_allclose(step_rk4(z, u, DT, PARAMS), [0.1, 0.0, 0.0, 1.0],
                               atol=1e-15)


def test_zero_speed_is_fixed_point():
    z = np.array([0.3, -0.2, 0.7, 0.0])
    u = np.array([0.2, 0.0])
    np.testing.assert_allclose(step_rk4(z, u, DT, PARAMS), z, atol=1e-15)


def test_slip_angle_formula_and_domain():
    beta = slip_angle(0.3, PARAMS)
    expected = math.atan(PARAMS.l_r * math.tan(0.3) / (PARAMS.l_f + PARAMS.l_r))
    assert abs(beta - expected) < 1e-15
    with pytest.raises(ValueError):
        slip_angle(math.pi / 2, PARAMS)


def test_turning_matches_fine_integrator():
    z = np.array([0.0, 0.0, 0.0, 1.0])
    u = np.array([0.3, 0.0])
    ref = fine_step(z, u, DT, PARAMS)
    assert np.max(np.abs(step_rk4(z, u, DT, PARAMS) - ref)) < 1e-6


def test_rk4_matches_fine_integrator_random():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        z, u = sample_envelope(rng)
        ref = fine_step(z, u, DT, PARAMS)
        err = np.max(np.abs(step_rk4(z, u, DT, PARAMS) - ref))
        worst = max(worst, err)
    assert worst < 1e-6


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(100):
        z, u = sample_envelope(rng)
        jz, ju = step_jacobians(z, u, DT, PARAMS)
        jz_fd, ju_fd = fd_jacobians(z, u, DT, PARAMS)
        scale_z = np.maximum(np.abs(jz_fd), 1.0)
        scale_u = np.maximum(np.abs(ju_fd), 1.0)
        assert np.max(np.abs(jz - jz_fd) / scale_z) < 1e-5
        assert np.max(np.abs(ju - ju_fd) / scale_u) < 1e-5


def test_rigid_motion_equivariance():
    # Rotating and translating the start pose transforms the whole rollout.
    rng = np.random.default_rng(11)
    z0 = np.array([0.2, -0.1, 0.3, 0.5])
    inputs = np.column_stack([rng.uniform(-0.3, 0.3, 30), rng.uniform(-0.5, 0.5, 30)])
    base = rollout(z0, inputs, DT, PARAMS)
    dpsi, shift = 1.1, np.array([0.7, -1.3])
    c, s = math.cos(dpsi), math.sin(dpsi)
    R = np.array([[c, -s], [s, c]])
    z0_t = np.concatenate([R @ z0[:2] + shift, [z0[2] + dpsi, z0[3]]])
    moved = rollout(z0_t, inputs, DT, PARAMS)
    np.testing.assert_allclose(moved[:, :2], base[:, :2] @ R.T + shift, atol=1e-9)
    np.testing.assert_allclose(moved[:, 2], base[:, 2] + dpsi, atol=1e-9)
    np.testing.assert_allclose(moved[:, 3], base[:, 3], atol=1e-12)


def test_state_wraps_heading_at_construction():
    st = VehicleState(0.0, 0.0, 3.5 * math.pi, 0.0)
    assert -math.pi < st.psi <= math.pi
    assert abs(st.psi - wrap_angle(3.5 * math.pi)) < 1e-15
    # pi maps to pi (half-open interval).
    assert VehicleState(0, 0, math.pi, 0).psi == pytest.approx(math.pi)
    assert VehicleState(0, 0, -math.pi, 0).psi == pytest.approx(math.pi)


def test_state_input_array_roundtrip():
    st = VehicleState(1.0, 2.0, 0.5, -0.3)
    np.testing.assert_allclose(VehicleState.from_array(st.as_array()).as_array(),
                               st.as_array())
    ui = VehicleInput(0.1, -0.4)
    np.testing.assert_allclose(VehicleInput.from_array(ui.as_array()).as_array(),
                               [0.1, -0.4])


def test_params_validation_and_radius():
    p = VehicleParams()
    assert p.covering_radius == pytest.approx(0.5 * math.hypot(0.36, 0.22))
    with pytest.raises(ValueError):
        VehicleParams(l_f=0.0)
    with pytest.raises(ValueError):
        VehicleParams(width=-0.1)


def test_derivative_shapes_and_values():
    z = np.array([0.0, 0.0, 0.5, 0.8])
    u = np.array([0.1, 0.3])
    dz = continuous_derivative(z, u, PARAMS)
    beta = slip_angle(0.1, PARAMS)
    assert dz[0] == pytest.approx(0.8 * math.cos(0.5 + beta))
    assert dz[1] == pytest.approx(0.8 * math.sin(0.5 + beta))
    assert dz[2] == pytest.approx(0.8 / PARAMS.l_r * math.sin(beta))
    assert dz[3] == pytest.approx(0.3)
