"""Kinematic bicycle model, RK4 discretization, and exact step Jacobians.

State z = (x, y, psi, v): rear-axle-free center position, heading, speed.
Input u = (delta_f, a): front steering angle and longitudinal acceleration.
Internally everything operates on plain float64 arrays; `VehicleState` /
`VehicleInput` are the user-facing views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(psi: float) -> float:
    """Normalize an angle into (-pi, pi]."""
    w = psi % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


@dataclass
class VehicleParams:
    """Geometric and actuation limits of a vehicle (1/10-scale defaults)."""

    l_f: float = 0.13
    l_r: float = 0.13
    length: float = 0.36
    width: float = 0.22
    delta_max: float = 0.35
    a_max: float = 1.0
    v_min: float = -1.0
    v_max: float = 2.0

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0:
            raise ValueError("axle distances must be positive")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("body dimensions must be positive")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    @property
    def covering_radius(self) -> float:
        """Radius of the smallest disc covering the body, centered at z."""
        return 0.5 * math.hypot(self.length, self.width)


@dataclass
class VehicleState:
    """Vehicle state with heading normalized to (-pi, pi] at construction."""

    x: float
    y: float
    psi: float
    v: float

    def __post_init__(self):
        self.psi = wrap_angle(self.psi)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v], dtype=float)

    @classmethod
    def from_array(cls, z: np.ndarray) -> "VehicleState":
        return cls(float(z[0]), float(z[1]), float(z[2]), float(z[3]))


@dataclass
class VehicleInput:
    delta_f: float
    a: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_f, self.a], dtype=float)

    @classmethod
    def from_array(cls, u: np.ndarray) -> "VehicleInput":
        return cls(float(u[0]), float(u[1]))


def slip_angle(delta_f: float, params: VehicleParams) -> float:
    """Sideslip angle beta = atan(l_r * tan(delta_f) / (l_f + l_r))."""
    if abs(delta_f) >= 0.5 * math.pi:
        raise ValueError("steering angle beyond +-pi/2 is outside the model")
    return math.atan(params.l_r * math.tan(delta_f) / params.wheelbase)


def continuous_derivative(z: np.ndarray, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Time derivative of the state under the kinematic bicycle model."""
    psi, v = z[2], z[3]
    beta = slip_angle(u[0], params)
    c = math.cos(psi + beta)
    s = math.sin(psi + beta)
    return np.array([v * c, v * s, v / params.l_r * math.sin(beta), u[1]])


def step_rk4(z: np.ndarray, u: np.ndarray, dt: float, params: VehicleParams) -> np.ndarray:
    """One classical RK4 step of duration dt with zero-order-hold input."""
    k1 = continuous_derivative(z, u, params)
    k2 = continuous_derivative(z + 0.5 * dt * k1, u, params)
    k3 = continuous_derivative(z + 0.5 * dt * k2, u, params)
    k4 = continuous_derivative(z + dt * k3, u, params)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _derivative_jacobians(z, u, params):
    """Jacobians of continuous_derivative wrt z and u at (z, u)."""
    psi, v = z[2], z[3]
    delta = u[0]
    lr, wb = params.l_r, params.wheelbase
    t = math.tan(delta)
    beta = math.atan(lr * t / wb)
    # d beta / d delta
    sec2 = 1.0 + t * t
    dbeta = (lr / wb) * sec2 / (1.0 + (lr * t / wb) ** 2)
    c = math.cos(psi + beta)
    s = math.sin(psi + beta)
    fz = np.zeros((4, 4))
    fz[0, 2] = -v * s
    fz[0, 3] = c
    fz[1, 2] = v * c
    fz[1, 3] = s
    fz[2, 3] = math.sin(beta) / lr
    fu = np.zeros((4, 2))
    fu[0, 0] = -v * s * dbeta
    fu[1, 0] = v * c * dbeta
    fu[2, 0] = (v / lr) * math.cos(beta) * dbeta
    fu[3, 1] = 1.0
    return fz, fu


def step_jacobians(z: np.ndarray, u: np.ndarray, dt: float, params: VehicleParams):
    """Exact Jacobians (d z_next / d z, d z_next / d u) of the RK4 step.

    Forward-mode chain rule through the four stages; matches step_rk4 to
    machine precision (finite differences are a test oracle only).
    """
    k1 = continuous_derivative(z, u, params)
    z2 = z + 0.5 * dt * k1
    k2 = continuous_derivative(z2, u, params)
    z3 = z + 0.5 * dt * k2
    k3 = continuous_derivative(z3, u, params)
    z4 = z + dt * k3
    eye = np.eye(4)

    a1, b1 = _derivative_jacobians(z, u, params)
    j2 = eye + 0.5 * dt * a1
    a2r, b2r = _derivative_jacobians(z2, u, params)
    a2 = a2r @ j2
    b2 = b2r + a2r @ (0.5 * dt * b1)
    j3 = eye + 0.5 * dt * a2
    a3r, b3r = _derivative_jacobians(z3, u, params)
    a3 = a3r @ j3
    b3 = b3r + a3r @ (0.5 * dt * b2)
    j4 = eye + dt * a3
    a4r, b4r = _derivative_jacobians(z4, u, params)
    a4 = a4r @ j4
    b4 = b4r + a4r @ (dt * b3)

    jz = eye + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    ju = (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return jz, ju


def rollout(z0: np.ndarray, inputs: np.ndarray, dt: float, params: VehicleParams) -> np.ndarray:
    """Integrate a sequence of inputs; returns (len(inputs)+1, 4) states."""
    states = np.empty((len(inputs) + 1, 4))
    states[0] = z0
    for k, u in enumerate(inputs):
        states[k + 1] = step_rk4(states[k], u, dt, params)
    return states
