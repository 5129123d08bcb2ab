"""Control-affine system models and the Clohessy-Wiltshire spacecraft model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from . import autodiff as ad

__all__ = [
    "DynamicsError",
    "ControlAffineDynamics",
    "CwParams",
    "cw_matrices",
    "cw_system",
    "rk4_step",
    "closed_loop_field",
    "closed_loop_jacobian",
]

Propagator = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


class DynamicsError(ValueError):
    pass


def rk4_step(deriv: Callable[[Any], Any], x: Any, h: float) -> Any:
    k1 = deriv(x)
    k2 = deriv(x + (0.5 * h) * k1)
    k3 = deriv(x + (0.5 * h) * k2)
    k4 = deriv(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True)
class ControlAffineDynamics:
    """``xdot = f(x) + g(x) u``.

    ``f`` must be written with :mod:`safe_rta.autodiff` primitives (or plain
    numpy operators) so it can be differentiated. ``g`` returns an ``(n, m)``
    matrix; it is handed duals when closed-loop Jacobians are taken, and a
    constant ``g`` may simply ignore its argument. ``propagator`` optionally
    replaces the built-in RK4 next-state prediction with an external,
    non-differentiated simulator.
    """

    n: int
    m_ctrl: int
    f: Callable[[Any], Any]
    g: Callable[[np.ndarray], np.ndarray]
    propagator: Optional[Propagator] = None
    max_substep: float = 1.0

    def _check(self, x: np.ndarray, u: np.ndarray) -> None:
        if x.shape != (self.n,):
            raise DynamicsError(f"state has shape {x.shape}, expected ({self.n},)")
        if u.shape != (self.m_ctrl,):
            raise DynamicsError(f"control has shape {u.shape}, expected ({self.m_ctrl},)")

    def state_derivative(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        self._check(x, u)
        return self.f(x) + self.g(x) @ u

    def propagate(self, x, u, dt: float) -> np.ndarray:
        """State after holding ``u`` for ``dt`` seconds."""
        if not dt > 0:
            raise DynamicsError(f"dt must be positive, got {dt}")
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        self._check(x, u)
        if self.propagator is not None:
            out = np.asarray(self.propagator(x, u, dt), dtype=float)
        else:
            steps = max(1, math.ceil(dt / self.max_substep - 1e-12))
            h = dt / steps
            deriv = lambda s: self.f(s) + self.g(s) @ u  # noqa: E731
            out = x
            for _ in range(steps):
                out = rk4_step(deriv, out, h)
        if not np.all(np.isfinite(out)):
            raise DynamicsError(f"propagation produced non-finite state from x={x}, u={u}, dt={dt}")
        return out

    def with_propagator(self, propagator: Propagator) -> "ControlAffineDynamics":
        return ControlAffineDynamics(self.n, self.m_ctrl, self.f, self.g, propagator, self.max_substep)


@dataclass(frozen=True)
class CwParams:
    mean_motion: float = 0.001027
    mass: float = 12.0
    num_deputies: int = 1
    controlled_index: int = 0

    def __post_init__(self):
        if not self.mean_motion > 0:
            raise DynamicsError("mean motion must be positive")
        if not self.mass > 0:
            raise DynamicsError("mass must be positive")
        if self.num_deputies < 1:
            raise DynamicsError("need at least one deputy")
        if not 0 <= self.controlled_index < self.num_deputies:
            raise DynamicsError(
                f"controlled_index {self.controlled_index} out of range for {self.num_deputies} deputies"
            )


def cw_matrices(mean_motion: float, mass: float) -> tuple[np.ndarray, np.ndarray]:
    """Single-deputy CW ``(A, B)`` for state ``[x, y, z, xdot, ydot, zdot]``."""
    n = mean_motion
    A = np.zeros((6, 6))
    A[0:3, 3:6] = np.eye(3)
    A[3, 0] = 3.0 * n * n
    A[3, 4] = 2.0 * n
    A[4, 3] = -2.0 * n
    A[5, 2] = -n * n
    B = np.zeros((6, 3))
    B[3:6, :] = np.eye(3) / mass
    return A, B


def cw_system(params: CwParams) -> ControlAffineDynamics:
    """Stacked CW dynamics for ``N`` deputies; only one deputy is actuated."""
    N = params.num_deputies
    A, B = cw_matrices(params.mean_motion, params.mass)
    n = params.mean_motion
    F = np.kron(np.eye(N), A)
    G = np.zeros((6 * N, 3))
    i = params.controlled_index
    G[6 * i : 6 * i + 6, :] = B

    def f(x):
        if not isinstance(x, ad.Dual):
            return x @ F.T
        # structured form keeps the dual path short (no dense matmul loop)
        X = x.reshape(x.shape[:-1] + (N, 6))
        acc = ad.stack(
            [
                3.0 * n * n * X[..., 0] + 2.0 * n * X[..., 4],
                -2.0 * n * X[..., 3],
                -n * n * X[..., 2],
            ],
            axis=-1,
        )
        return ad.concatenate([X[..., 3:6], acc], axis=-1).reshape(x.shape)

    def g(x):
        return G

    return ControlAffineDynamics(n=6 * N, m_ctrl=3, f=f, g=g)


def closed_loop_field(dyn: ControlAffineDynamics, ctrl, t: float = 0.0) -> Callable[[Any], Any]:
    """``x -> f(x) + g(x) u_b(x, t)`` as a differentiable function."""

    def field(x):
        u = ctrl.control(x, t)
        return dyn.f(x) + ad.vsum(dyn.g(x) * u[..., None, :], axis=-1)

    return field


def closed_loop_jacobian(dyn: ControlAffineDynamics, ctrl, x, t: float = 0.0) -> np.ndarray:
    """Jacobian of the closed-loop vector field under the backup controller."""
    x = np.asarray(x, dtype=float)
    return ad.jacobian(closed_loop_field(dyn, ctrl, t), x)
