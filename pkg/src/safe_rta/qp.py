"""Small dense QP behind the ASIF filters.

minimize ||u_des - u||^2  s.t.  lower <= u <= upper,  c_i . u >= d_i

The objective has identity Hessian, so the problem is a Euclidean projection
of ``u_des`` onto a polyhedron. It is solved with a dual active-set method
(Goldfarb-Idnani): start from the unconstrained optimum and add violated
constraints one at a time, dropping any whose multiplier would go negative.
That gives exact pass-through when ``u_des`` is already feasible and a clean
infeasibility certificate when no ``u`` satisfies the rows.

If the rows cannot be met inside the box, they are softened with one shared
slack ``s >= 0`` costing ``RELAX_WEIGHT * s**2``; box bounds always stay hard.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

__all__ = [
    "QpError",
    "QpStatus",
    "BarrierRow",
    "QpProblem",
    "QpResult",
    "RELAX_WEIGHT",
    "solve",
    "project",
    "verify_kkt",
]

log = logging.getLogger(__name__)

RELAX_WEIGHT = 1e6


class QpError(ValueError):
    pass


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    RELAXED = "relaxed"
    INFEASIBLE_BOX = "infeasible_box"


@dataclass(frozen=True)
class BarrierRow:
    """One barrier condition written as ``coeff . u >= offset``."""

    coeff: np.ndarray
    offset: float
    source: str = ""
    index: int = 0

    def residual(self, u) -> float:
        return float(np.dot(self.coeff, u) - self.offset)


@dataclass
class QpProblem:
    u_des: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rows: list[BarrierRow] = field(default_factory=list)

    def __post_init__(self):
        self.u_des = np.asarray(self.u_des, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        m = self.u_des.shape[0]
        if self.lower.shape != (m,) or self.upper.shape != (m,):
            raise QpError("bounds must match the control dimension")
        for r in self.rows:
            if np.shape(r.coeff) != (m,):
                raise QpError(f"row {r.source!r} has coefficient shape {np.shape(r.coeff)}, expected ({m},)")

    def row_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.u_des.shape[0]
        if not self.rows:
            return np.zeros((0, m)), np.zeros(0)
        C = np.array([r.coeff for r in self.rows], dtype=float)
        d = np.array([r.offset for r in self.rows], dtype=float)
        return C, d

    def all_constraints(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds and rows stacked as ``A u >= b``."""
        m = self.u_des.shape[0]
        C, d = self.row_matrix()
        A = np.vstack([np.eye(m), -np.eye(m), C])
        b = np.concatenate([self.lower, -self.upper, d])
        return A, b


@dataclass(frozen=True)
class QpResult:
    u: np.ndarray
    status: QpStatus
    slack: float
    objective: float
    iterations: int


class _Infeasible(Exception):
    pass


def _small_qr(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Modified Gram-Schmidt with one re-orthogonalisation pass.

    ``rows`` holds the active normals as rows; returns orthonormal rows ``Q``
    and upper-triangular ``R`` with ``rows.T = Q.T @ R``.
    """
    q = rows.shape[0]
    Q = np.empty_like(rows)
    R = np.zeros((q, q))
    for j in range(q):
        v = rows[j].copy()
        for _ in range(2):
            for i in range(j):
                c = float(Q[i] @ v)
                R[i, j] += c
                v -= c * Q[i]
        nv = float(np.sqrt(v @ v))
        R[j, j] = nv
        Q[j] = v / nv if nv > 0.0 else v
    return Q, R


def _back_substitute(R: np.ndarray, y: np.ndarray) -> np.ndarray:
    q = len(y)
    x = np.zeros(q)
    for i in range(q - 1, -1, -1):
        x[i] = (y[i] - float(R[i, i + 1 :] @ x[i + 1 :])) / R[i, i] if R[i, i] != 0.0 else 0.0
    return x


def project(u0: np.ndarray, A: np.ndarray, b: np.ndarray, max_iter: int | None = None) -> tuple[np.ndarray, int]:
    """Closest point to ``u0`` in ``{u : A u >= b}`` (dual active set).

    Raises ``_Infeasible`` when the polyhedron is empty.
    """
    u0 = np.asarray(u0, dtype=float)
    nvar = u0.shape[0]
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 0.0
    # zero rows are either vacuous or impossible
    if np.any(~keep & (b > 0.0)):
        raise _Infeasible
    A = A[keep] / norms[keep, None]
    b = b[keep] / norms[keep]
    x = u0.copy()
    active: list[int] = []
    lam: list[float] = []
    if max_iter is None:
        max_iter = 20 * (len(b) + nvar) + 50
    it = 0
    while True:
        s = A @ x - b
        tol = 1e-12 * (1.0 + np.abs(b) + np.linalg.norm(x))
        viol = np.where(s < -tol, s, 0.0)
        if active:
            viol[active] = 0.0
        p = int(np.argmin(viol))
        if viol[p] >= 0.0:
            return x, it
        lam_p = 0.0
        n_p = A[p]
        while True:
            it += 1
            if it > max_iter:
                raise QpError("active-set iteration limit reached")
            if active:
                Q, R = _small_qr(A[active])
                proj = Q @ n_p
                r = _back_substitute(R, proj)
                # a full active set spans the space; z is zero up to roundoff
                z = np.zeros(nvar) if len(active) == nvar else n_p - proj @ Q
            else:
                r = np.zeros(0)
                z = n_p
            t1, k = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14:
                    tj = lam[j] / rj
                    if tj < t1:
                        t1, k = tj, j
            zz = float(z @ z)
            s_p = float(n_p @ x - b[p])
            # rows are unit length, so |z| <= 1; below 1e-8 n_p is treated as dependent
            t2 = -s_p / zz if zz > 1e-16 else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise _Infeasible
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x + t * z
            for j in range(len(lam)):
                lam[j] -= t * r[j]
            lam_p += t
            if t == t2:
                active.append(p)
                lam.append(lam_p)
                break
            del active[k]
            del lam[k]


def solve(problem: QpProblem, relax_weight: float = RELAX_WEIGHT) -> QpResult:
    """Solve an ASIF QP; see the module docstring for the relaxation rule."""
    p = problem
    C, d = p.row_matrix()
    arrays = (p.u_des, p.lower, p.upper, C, d)
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise QpError("QP data contains non-finite entries")
    m = p.u_des.shape[0]
    if np.any(p.lower > p.upper):
        u = 0.5 * (p.lower + p.upper)
        return QpResult(u, QpStatus.INFEASIBLE_BOX, 0.0, float(np.sum((u - p.u_des) ** 2)), 0)

    A, b = p.all_constraints()
    try:
        u, it = project(p.u_des, A, b)
        status, slack = QpStatus.OPTIMAL, 0.0
    except _Infeasible:
        # y = (u, w) with w = sqrt(relax_weight) * s turns the penalty into a plain projection
        scale = np.sqrt(relax_weight)
        k = len(d)
        Ar = np.zeros((2 * m + k + 1, m + 1))
        Ar[: 2 * m + k, :m] = A
        Ar[2 * m : 2 * m + k, m] = 1.0 / scale
        Ar[-1, m] = 1.0
        br = np.concatenate([b, [0.0]])
        y, it = project(np.concatenate([p.u_des, [0.0]]), Ar, br)
        u, slack = y[:m], max(0.0, float(y[m] / scale))
        status = QpStatus.RELAXED
        log.info("barrier rows infeasible within actuation bounds; relaxed with slack %.3e", slack)

    over = np.maximum(p.lower - u, u - p.upper)
    if np.any(over > 1e-9):
        raise QpError(f"solver left the actuation box by {over.max():.3e}")
    u = np.clip(u, p.lower, p.upper)
    objective = float(np.sum((p.u_des - u) ** 2) + relax_weight * slack**2)
    return QpResult(u, status, slack, objective, it)


def verify_kkt(problem: QpProblem, u) -> float:
    """KKT residual of ``u`` for the hard (unrelaxed) problem.

    Multipliers are fitted by non-negative least squares over the constraints
    active at ``u``; the residual is the larger of the stationarity error and
    the worst constraint violation.
    """
    u = np.asarray(u, dtype=float)
    A, b = problem.all_constraints()
    s = A @ u - b
    scale = 1.0 + np.linalg.norm(A, axis=1) * np.linalg.norm(u) + np.abs(b)
    infeas = float(np.max(np.maximum(-s, 0.0) / scale, initial=0.0))
    active = np.abs(s) <= 1e-9 * scale
    grad = 2.0 * (u - problem.u_des)
    if np.any(active):
        _, stat = nnls(A[active].T, grad)
    else:
        stat = float(np.linalg.norm(grad))
    return max(float(stat), infeas)


def rows_satisfied(rows: Sequence[BarrierRow], u, tol: float = 0.0) -> bool:
    return all(r.residual(u) >= -tol for r in rows)
