"""RTA modules: the standard filter interface, Simplex, ASIF and cascades.

Every module maps ``(x_sys, u_des)`` to an admissible ``u_act``. Constraint
based modules convert ``x_sys`` to a flat RTA state first (identity by
default) and then apply one of the four universal algorithms.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import qp
from .backup import BackupController, BackupTrajectory, compute_backup_trajectory
from .constraints import SafetyConstraint
from .dynamics import ControlAffineDynamics, DynamicsError, closed_loop_field

__all__ = [
    "INTERVENE_TOL",
    "FilterError",
    "RtaModule",
    "ExplicitSimplex",
    "ImplicitSimplex",
    "ExplicitAsif",
    "ImplicitAsif",
    "CascadedRta",
    "cascaded_filter",
    "build_explicit_barrier_rows",
    "build_implicit_barrier_rows",
    "sensitivity_matrices",
    "SENSITIVITY_SUBSTEPS",
    "retained_indices",
]

log = logging.getLogger(__name__)

INTERVENE_TOL = 1e-9
SAMPLED_TOL = 1e-10


class FilterError(RuntimeError):
    pass


def _identity_state(x_sys: Any) -> np.ndarray:
    return np.asarray(x_sys, dtype=float)


class RtaModule:
    """Base RTA interface.

    Subclasses implement :meth:`compute` on the converted RTA state.
    ``intervening`` and ``status`` describe the most recent call.
    """

    def __init__(self, state_converter: Optional[Callable[[Any], np.ndarray]] = None):
        self.state_converter = state_converter or _identity_state
        self.intervening = False
        self.status = "n/a"

    def compute(self, x: np.ndarray, u_des: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def filter(self, x_sys: Any, u_des, t: float = 0.0) -> np.ndarray:
        u_des = np.asarray(u_des, dtype=float)
        x = self.state_converter(x_sys)
        u_act = self.compute(x, u_des, t)
        self.intervening = bool(np.max(np.abs(u_act - u_des), initial=0.0) > INTERVENE_TOL)
        return u_act

    __call__ = filter


class _ConstraintBased(RtaModule):
    def __init__(
        self,
        dynamics: ControlAffineDynamics,
        constraints: Sequence[SafetyConstraint],
        lower,
        upper,
        state_converter=None,
    ):
        super().__init__(state_converter)
        self.dynamics = dynamics
        self.constraints = list(constraints)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != (dynamics.m_ctrl,) or self.upper.shape != (dynamics.m_ctrl,):
            raise FilterError("actuation bounds must match the control dimension")


# -- Simplex --------------------------------------------------------------


class _Simplex(_ConstraintBased):
    def __init__(self, dynamics, constraints, backup: BackupController, dt: float, lower, upper, state_converter=None):
        super().__init__(dynamics, constraints, lower, upper, state_converter)
        if not dt > 0:
            raise FilterError("Simplex prediction interval must be positive")
        self.backup = backup
        self.dt = dt

    def predicate(self, x: np.ndarray, u: np.ndarray, t: float) -> bool:
        raise NotImplementedError

    def compute(self, x, u_des, t):
        u_try = np.clip(u_des, self.lower, self.upper)
        try:
            safe = self.predicate(x, u_try, t)
        except (DynamicsError, ValueError, RuntimeError) as exc:
            log.warning("Simplex prediction failed (%s); switching to backup", exc)
            safe = False
        if safe:
            self.backup.reset()
            self.status = "primary"
            return u_try
        self.status = "backup"
        return self.backup.control(x, t)


class ExplicitSimplex(_Simplex):
    """Pass ``u_des`` if the one-step prediction keeps every ``h_i >= 0``."""

    def predicate(self, x, u, t):
        x_next = self.dynamics.propagate(x, u, self.dt)
        return all(c.evaluate(x_next) >= 0.0 for c in self.constraints)


class ImplicitSimplex(_Simplex):
    """Pass ``u_des`` if the backup trajectory from the predicted state stays allowable."""

    def __init__(self, dynamics, constraints, backup, dt, lower, upper, horizon: float, dt_b: float = 1.0, state_converter=None):
        super().__init__(dynamics, constraints, backup, dt, lower, upper, state_converter)
        if not horizon > 0 or not dt_b > 0:
            raise FilterError("implicit Simplex needs a positive horizon and backup step")
        self.horizon = horizon
        self.dt_b = dt_b

    def predicate(self, x, u, t):
        x_next = self.dynamics.propagate(x, u, self.dt)
        traj = compute_backup_trajectory(self.dynamics, self.backup, x_next, self.horizon, self.dt_b, t + self.dt)
        return all(np.all(c.evaluate_many(traj.states) >= 0.0) for c in self.constraints)


# -- ASIF -----------------------------------------------------------------


def build_explicit_barrier_rows(
    x, constraints: Sequence[SafetyConstraint], dyn: ControlAffineDynamics
) -> list[qp.BarrierRow]:
    """One row per constraint: ``grad h . g u >= -s (grad h . f + alpha(h))``.

    ``s`` is the constraint's responsibility share (1 unless it is shared).
    """
    return _explicit_rows_and_values(x, constraints, dyn)[0]


def _explicit_rows_and_values(x, constraints, dyn) -> tuple[list[qp.BarrierRow], np.ndarray]:
    x = np.asarray(x, dtype=float)
    fx = np.asarray(dyn.f(x), dtype=float)
    gx = np.asarray(dyn.g(x), dtype=float)
    rows = []
    values = np.empty(len(constraints))
    for i, c in enumerate(constraints):
        h, grad = c.value_and_gradient(x)
        values[i] = h
        rows.append(qp.BarrierRow(grad @ gx, -c.responsibility * (float(grad @ fx) + float(c.alpha(h))), c.name, 0))
    return rows, values


SENSITIVITY_SUBSTEPS = 4


def sensitivity_matrices(
    dyn: ControlAffineDynamics,
    backup: BackupController,
    traj: BackupTrajectory,
    t0: float = 0.0,
    substeps: int = SENSITIVITY_SUBSTEPS,
) -> np.ndarray:
    """``D_j = d phi_j / d x0`` along a backup trajectory.

    Integrates ``Ddot = J_cl(x) D`` from ``D_0 = I`` with ``substeps`` RK4
    steps per backup interval, taking ``J_cl`` at the RK4 stage states of the
    closed-loop model started from each trajectory point. The backup
    controller runs with the internal state it had at the end of the rollout.

    One RK4 step of a linear ODE is a matrix ``M`` applied to ``D``, so the
    per-interval matrices are formed first (batched over the whole trajectory
    when the backup is time invariant) and then chained.
    """
    if substeps < 1:
        raise FilterError("substeps must be >= 1")
    states = traj.states
    n = states.shape[1]
    h = traj.dt_b / substeps
    backup.save()
    if traj.controller_state is not None:
        backup.internal_state = {k: v.copy() for k, v in traj.controller_state.items()}
    try:
        if backup.time_invariant:
            steps = _interval_maps_batched(dyn, backup, states[:-1], h, substeps, t0)
        else:
            steps = np.array(
                [_interval_map(dyn, backup, states[j], h, substeps, t0 + j * traj.dt_b) for j in range(len(states) - 1)]
            ).reshape(len(states) - 1, n, n)
    finally:
        backup.restore()
    out = np.empty((len(states), n, n))
    D = np.eye(n)
    out[0] = D
    for j, M in enumerate(steps):
        D = M @ D
        if not np.isfinite(D).all():
            raise FilterError(f"sensitivity matrix became non-finite at trajectory index {j + 1}")
        out[j + 1] = D
    return out


def _rk4_linear_map(J1, J2, J3, J4, h: float) -> np.ndarray:
    """Matrix of one RK4 step of ``Ddot = J(t) D``; works on stacks of matrices."""
    eye = np.eye(J1.shape[-1])
    P1 = J1
    P2 = J2 @ (eye + 0.5 * h * P1)
    P3 = J3 @ (eye + 0.5 * h * P2)
    P4 = J4 @ (eye + h * P3)
    return eye + (h / 6.0) * (P1 + 2.0 * P2 + 2.0 * P3 + P4)


def _interval_map(dyn, backup, x, h: float, substeps: int, t: float) -> np.ndarray:
    M = np.eye(len(x))
    for k in range(substeps):
        tk = t + k * h
        F1, J1 = ad.value_and_jacobian(closed_loop_field(dyn, backup, tk), x)
        F2, J2 = ad.value_and_jacobian(closed_loop_field(dyn, backup, tk + 0.5 * h), x + 0.5 * h * F1)
        F3, J3 = ad.value_and_jacobian(closed_loop_field(dyn, backup, tk + 0.5 * h), x + 0.5 * h * F2)
        F4, J4 = ad.value_and_jacobian(closed_loop_field(dyn, backup, tk + h), x + h * F3)
        M = _rk4_linear_map(J1, J2, J3, J4, h) @ M
        x = x + (h / 6.0) * (F1 + 2.0 * F2 + 2.0 * F3 + F4)
    return M


def _interval_maps_batched(dyn, backup, xs: np.ndarray, h: float, substeps: int, t0: float) -> np.ndarray:
    # stage states depend only on each interval's start state, so all intervals advance together
    field = closed_loop_field(dyn, backup, t0)
    M = np.broadcast_to(np.eye(xs.shape[1]), (len(xs),) + (xs.shape[1],) * 2)
    for _ in range(substeps):
        F1, J1 = ad.batch_value_and_jacobian(field, xs)
        F2, J2 = ad.batch_value_and_jacobian(field, xs + 0.5 * h * F1)
        F3, J3 = ad.batch_value_and_jacobian(field, xs + 0.5 * h * F2)
        F4, J4 = ad.batch_value_and_jacobian(field, xs + h * F3)
        M = _rk4_linear_map(J1, J2, J3, J4, h) @ M
        xs = xs + (h / 6.0) * (F1 + 2.0 * F2 + 2.0 * F3 + F4)
    return M


def retained_indices(values: np.ndarray, stride: int, include_minima: bool = True) -> np.ndarray:
    """Every ``stride``-th trajectory index, plus local minima of ``values``."""
    n = len(values)
    keep = set(range(0, n, stride))
    if include_minima and n > 1:
        v = values
        for j in range(1, n - 1):
            if v[j] <= v[j - 1] and v[j] <= v[j + 1]:
                keep.add(j)
        if v[-1] < v[-2]:
            keep.add(n - 1)
    return np.array(sorted(keep), dtype=int)


def build_implicit_barrier_rows(
    x,
    traj: BackupTrajectory,
    constraints: Sequence[SafetyConstraint],
    dyn: ControlAffineDynamics,
    backup: BackupController,
    stride: int = 5,
    include_minima: bool = True,
    sensitivities: Optional[np.ndarray] = None,
) -> list[qp.BarrierRow]:
    """Rows ``grad phi(phi_j) D_j (f(x) + g(x) u) + alpha(phi(phi_j)) >= 0``."""
    x = np.asarray(x, dtype=float)
    if stride < 1:
        raise FilterError("stride must be >= 1")
    D = sensitivity_matrices(dyn, backup, traj) if sensitivities is None else sensitivities
    fx = np.asarray(dyn.f(x), dtype=float)
    gx = np.asarray(dyn.g(x), dtype=float)
    rows = []
    for c in constraints:
        values = c.evaluate_many(traj.states)
        idx = retained_indices(values, stride, include_minima)
        vals, grads = c.values_and_gradients(traj.states[idx])
        # w_j = grad phi(phi_j) D_j
        W = np.einsum("ri,rij->rj", grads, D[idx])
        coeffs = W @ gx
        offsets = -c.responsibility * (W @ fx + np.asarray(c.alpha(vals), dtype=float))
        for j, cf, off in zip(idx, coeffs, offsets):
            rows.append(qp.BarrierRow(cf, float(off), c.name, int(j)))
    return rows


class _Asif(_ConstraintBased):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.relax_weight = qp.RELAX_WEIGHT
        self.last_result: Optional[qp.QpResult] = None

    def rows(self, x: np.ndarray, t: float) -> list[qp.BarrierRow]:
        raise NotImplementedError

    def compute(self, x, u_des, t):
        rows = self.rows(x, t)
        result = qp.solve(qp.QpProblem(u_des, self.lower, self.upper, rows), self.relax_weight)
        if result.status is qp.QpStatus.RELAXED:
            log.info("ASIF relaxed barrier rows at t=%.3f, slack %.3e", t, result.slack)
        self.last_result = result
        self.status = result.status.value
        return result.u


class ExplicitAsif(_Asif):
    """QP over explicit barrier rows built from (control invariant) ``h_i``.

    The rows are continuous-time conditions. When the control is held for
    ``sample_period`` seconds, curvature of ``h`` along the held input can
    still lose ground between samples. With ``sample_period`` set, each
    solution is checked against the one-step prediction
    ``h(x+) >= h(x) - dt * alpha(h(x))`` (for shared constraints, the same
    split as the rows, measured against the zero-input prediction). A row
    that falls short has its offset raised to what the prediction requires
    and the QP is solved again, up to ``max_corrections`` times.
    """

    def __init__(
        self,
        dynamics,
        constraints,
        lower,
        upper,
        sample_period: Optional[float] = None,
        max_corrections: int = 10,
        state_converter=None,
    ):
        super().__init__(dynamics, constraints, lower, upper, state_converter)
        if sample_period is not None and not sample_period > 0:
            raise FilterError("sample_period must be positive")
        self.sample_period = sample_period
        self.max_corrections = max_corrections
        self.corrections = 0

    def rows(self, x, t):
        return build_explicit_barrier_rows(x, self.constraints, self.dynamics)

    def compute(self, x, u_des, t):
        if self.sample_period is None:
            return super().compute(x, u_des, t)
        dt = self.sample_period
        rows, h = _explicit_rows_and_values(x, self.constraints, self.dynamics)
        alpha_h = np.array([float(c.alpha(v)) for c, v in zip(self.constraints, h)])
        share = np.array([c.responsibility for c in self.constraints])
        x_drift = self.dynamics.propagate(x, np.zeros(self.dynamics.m_ctrl), dt)
        h_drift = np.array([c.evaluate(x_drift) for c in self.constraints])
        # a shared row only answers for its share of the drift-plus-alpha change
        floor = (1.0 - share) * h_drift + share * (h - dt * alpha_h)
        C = np.array([r.coeff for r in rows]).reshape(len(rows), -1)
        offsets = np.array([r.offset for r in rows])
        self.corrections = 0
        prev_offsets = prev_gap = None
        while True:
            current = [replace(r, offset=float(o)) for r, o in zip(rows, offsets)]
            result = qp.solve(qp.QpProblem(u_des, self.lower, self.upper, current), self.relax_weight)
            if self.corrections >= self.max_corrections or result.status is not qp.QpStatus.OPTIMAL:
                break
            x_next = self.dynamics.propagate(x, result.u, dt)
            gap = floor - np.array([c.evaluate(x_next) for c in self.constraints])
            short = gap > SAMPLED_TOL
            if not np.any(short):
                break
            # model h(x+) as h_drift + dt * C u + defect, with the defect measured at this u
            defect = -gap + floor - h_drift - dt * (C @ result.u)
            required = (floor + SAMPLED_TOL - h_drift - defect) / dt
            step = 1.25 * (required - offsets)
            if prev_gap is not None:
                # the defect moves with u; a secant on offset -> gap converges faster
                slope = (gap - prev_gap) / np.where(offsets != prev_offsets, offsets - prev_offsets, np.nan)
                secant = -(gap + SAMPLED_TOL) / slope
                usable = np.isfinite(secant) & (secant > 0)
                step = np.where(usable, np.minimum(np.maximum(secant, required - offsets), 4.0 * step), step)
            prev_offsets, prev_gap = offsets, gap
            offsets = np.where(short, offsets + np.maximum(step, 0.0), offsets)
            self.corrections += 1
        if result.status is qp.QpStatus.RELAXED:
            log.info("ASIF relaxed barrier rows at t=%.3f, slack %.3e", t, result.slack)
        self.last_result = result
        self.status = result.status.value
        return result.u


class ImplicitAsif(_Asif):
    """QP over barrier rows taken along the backup trajectory from ``x``."""

    def __init__(
        self,
        dynamics,
        constraints,
        backup: BackupController,
        lower,
        upper,
        horizon: float,
        dt_b: float = 1.0,
        stride: int = 5,
        include_minima: bool = True,
        state_converter=None,
        substeps: int = SENSITIVITY_SUBSTEPS,
    ):
        super().__init__(dynamics, constraints, lower, upper, state_converter)
        if not horizon > 0 or not dt_b > 0:
            raise FilterError("implicit ASIF needs a positive horizon and backup step")
        if substeps < 1:
            raise FilterError("substeps must be >= 1")
        self.substeps = substeps
        self.backup = backup
        self.horizon = horizon
        self.dt_b = dt_b
        self.stride = stride
        self.include_minima = include_minima

    def rows(self, x, t):
        traj = compute_backup_trajectory(self.dynamics, self.backup, x, self.horizon, self.dt_b, t)
        D = sensitivity_matrices(self.dynamics, self.backup, traj, t, self.substeps)
        return build_implicit_barrier_rows(
            x, traj, self.constraints, self.dynamics, self.backup, self.stride, self.include_minima, D
        )


# -- composition ----------------------------------------------------------


class CascadedRta(RtaModule):
    """Apply modules in order; each filters the previous output, last wins."""

    def __init__(self, modules: Sequence[RtaModule], state_converter=None):
        if not modules:
            raise FilterError("a cascade needs at least one module")
        super().__init__(state_converter or (lambda x: x))
        self.modules = list(modules)

    def compute(self, x_sys, u_des, t):
        u = u_des
        for m in self.modules:
            u = m.filter(x_sys, u, t)
        self.status = self.modules[-1].status
        return u


def cascaded_filter(modules: Sequence[RtaModule], x_sys, u_des, t: float = 0.0) -> np.ndarray:
    return CascadedRta(modules).filter(x_sys, u_des, t)
