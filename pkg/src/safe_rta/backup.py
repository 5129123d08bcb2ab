"""Backup controllers and closed-loop backup trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .dynamics import ControlAffineDynamics, DynamicsError

__all__ = [
    "BackupController",
    "ZeroBackup",
    "LinearFeedbackBackup",
    "StationKeepingBackup",
    "BackupTrajectory",
    "BackupTrajectoryError",
    "backup_control",
    "compute_backup_trajectory",
    "dlqr",
]


class BackupTrajectoryError(RuntimeError):
    def __init__(self, message: str, partial: np.ndarray):
        super().__init__(message)
        self.partial = partial


def dlqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, dt: float) -> np.ndarray:
    """Discrete LQR gain for the zero-order-hold discretisation of ``(A, B)``.

    Returns ``K`` such that ``u = -K x`` stabilises ``x+ = Ad x + Bd u``.
    """
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A * dt
    M[:n, n:] = B * dt
    E = scipy.linalg.expm(M)
    Ad, Bd = E[:n, :n], E[:n, n:]
    try:
        P = scipy.linalg.solve_discrete_are(Ad, Bd, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ValueError(f"discrete Riccati equation did not converge: {exc}") from exc
    K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    residual = Ad.T @ P @ Ad - P - Ad.T @ P @ Bd @ K + Q
    if not np.all(np.isfinite(K)) or np.max(np.abs(residual)) > 1e-6 * max(1.0, np.max(np.abs(P))):
        raise ValueError("discrete Riccati solution failed its residual check")
    if np.max(np.abs(np.linalg.eigvals(Ad - Bd @ K))) >= 1.0:
        raise ValueError("LQR gain does not stabilise the discretised system")
    return K


def _apply_gain(K: np.ndarray, err: Any) -> Any:
    """``K @ err`` for one state, or row-wise over a stack of states."""
    if len(ad._shape(err)) == 1:
        return K @ err
    return ad.vsum(K * err[..., None, :], axis=-1)


class BackupController:
    """Saturated control law ``u_b(x, t)`` with savable internal state.

    Subclasses implement :meth:`raw_control` with autodiff primitives so the
    closed loop can be differentiated. Internal state lives in
    ``internal_state`` as a dict of float arrays.

    ``time_invariant`` controllers ignore ``t`` and accept a stack of states
    ``(m, n)`` once their internal state is fixed; sensitivity integration
    then evaluates all trajectory points in one batch.
    """

    time_invariant = False

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ValueError("backup control bounds are inconsistent")
        self.m_ctrl = self.lower.shape[0]
        self.internal_state: dict[str, np.ndarray] = {}
        self.saved_state: Optional[dict[str, np.ndarray]] = None

    def raw_control(self, x: Any, t: float) -> Any:
        raise NotImplementedError

    def control(self, x: Any, t: float = 0.0) -> Any:
        u = ad.clip(self.raw_control(x, t), self.lower, self.upper)
        if not isinstance(u, ad.Dual):
            lead = ad._shape(x)[:-1]
            u = np.broadcast_to(np.asarray(u, dtype=float), lead + (self.m_ctrl,)).copy()
        return u

    def save(self) -> None:
        self.saved_state = {k: v.copy() for k, v in self.internal_state.items()}

    def restore(self) -> None:
        if self.saved_state is None:
            raise RuntimeError("restore() called before save()")
        self.internal_state = {k: v.copy() for k, v in self.saved_state.items()}

    def reset(self) -> None:
        """Forget transient internal state (called when the backup disengages)."""


def backup_control(ctrl: BackupController, x, t: float = 0.0) -> np.ndarray:
    return ctrl.control(np.asarray(x, dtype=float), t)


class ZeroBackup(BackupController):
    time_invariant = True

    def __init__(self, m_ctrl: int, u_max: float = 1.0):
        super().__init__(-u_max * np.ones(m_ctrl), u_max * np.ones(m_ctrl))

    def raw_control(self, x, t):
        return np.zeros(self.m_ctrl)


class LinearFeedbackBackup(BackupController):
    """``u = u_ff - K (x[block] - target)``, saturated."""

    time_invariant = True

    def __init__(self, K, lower, upper, target=None, block: slice = slice(None), feedforward=None):
        super().__init__(lower, upper)
        self.K = np.asarray(K, dtype=float)
        self.block = block
        self.target = None if target is None else np.asarray(target, dtype=float)
        self.feedforward = np.zeros(self.m_ctrl) if feedforward is None else np.asarray(feedforward, dtype=float)

    def raw_control(self, x, t):
        err = x[..., self.block]
        if self.target is not None:
            err = err - self.target
        return self.feedforward - _apply_gain(self.K, err)


class StationKeepingBackup(BackupController):
    """Brings one CW deputy to rest and holds it where the backup engaged.

    The hold point is latched into ``internal_state["setpoint"]`` the first
    time the controller runs after a reset; a feedforward thrust cancels the
    CW drift there so the hold point is an equilibrium.
    """

    time_invariant = True

    def __init__(self, K, mean_motion: float, mass: float, u_max: float, deputy_index: int = 0):
        super().__init__(-u_max * np.ones(3), u_max * np.ones(3))
        self.K = np.asarray(K, dtype=float)
        self.n = mean_motion
        self.mass = mass
        self.offset = 6 * deputy_index
        self.reset()

    def reset(self) -> None:
        self.internal_state = {"setpoint": np.full(3, np.nan)}

    def raw_control(self, x, t):
        sp = self.internal_state["setpoint"]
        block = x[..., self.offset : self.offset + 6]
        if np.isnan(sp[0]):
            if len(ad._shape(block)) != 1:
                raise ValueError("set point must be latched from a single state before batched evaluation")
            sp = np.array(ad.primal(block)[0:3], dtype=float)
            self.internal_state["setpoint"] = sp
        n2 = self.n * self.n
        u_ff = self.mass * np.array([-3.0 * n2 * sp[0], 0.0, n2 * sp[2]])
        target = np.concatenate([sp, np.zeros(3)])
        return u_ff - _apply_gain(self.K, block - target)


@dataclass(frozen=True)
class BackupTrajectory:
    states: np.ndarray  # (J + 1, n), states[j] at time j * dt_b
    controls: np.ndarray  # (J, m)
    dt_b: float
    horizon: float
    # controller internal state at the end of the rollout (e.g. latched set points)
    controller_state: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.states)


def compute_backup_trajectory(
    dyn: ControlAffineDynamics,
    ctrl: BackupController,
    x0,
    horizon: float,
    dt_b: float,
    t0: float = 0.0,
) -> BackupTrajectory:
    """Roll the backup law forward from ``x0``; the controller state is left untouched."""
    if not horizon > 0 or not dt_b > 0:
        raise ValueError("horizon and dt_b must be positive")
    steps_f = horizon / dt_b
    steps = int(round(steps_f))
    if steps < 1 or not math.isclose(steps, steps_f, rel_tol=0.0, abs_tol=1e-9):
        raise ValueError(f"horizon {horizon} is not an integer multiple of dt_b {dt_b}")
    x = np.asarray(x0, dtype=float)
    states = np.empty((steps + 1, x.shape[0]))
    controls = np.empty((steps, ctrl.m_ctrl))
    states[0] = x
    ctrl.save()
    try:
        for j in range(steps):
            u = ctrl.control(states[j], t0 + j * dt_b)
            controls[j] = u
            try:
                states[j + 1] = dyn.propagate(states[j], u, dt_b)
            except DynamicsError as exc:
                raise BackupTrajectoryError(
                    f"backup propagation failed at step {j}: {exc}", states[: j + 1].copy()
                ) from exc
        end_state = {k: v.copy() for k, v in ctrl.internal_state.items()}
    finally:
        ctrl.restore()
    return BackupTrajectory(states, controls, dt_b, horizon, end_state)
