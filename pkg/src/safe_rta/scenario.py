"""Multi-deputy spacecraft inspection scenario.

Each deputy runs its own LQR primary controller and its own RTA instance.
The RTA state is the stacked ``6N`` state of all deputies with the filtering
deputy marked as the controlled one; other deputies drift under the CW model
from that instance's point of view.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import qp
from .backup import StationKeepingBackup, dlqr
from .constraints import SafetyConstraint, StrengtheningFn, hocbf_transform
from .dynamics import CwParams, cw_matrices, cw_system
from .filters import (
    ExplicitAsif,
    ExplicitSimplex,
    ImplicitAsif,
    ImplicitSimplex,
    RtaModule,
)

__all__ = [
    "PHI_KEYS",
    "FILTER_KINDS",
    "ScenarioError",
    "InspectionConfig",
    "LogRow",
    "SimulationLog",
    "make_constraints",
    "explicit_constraints",
    "make_filter",
    "lqr_gain",
    "lqr_primary",
    "initial_states",
    "phi_values",
    "run_simulation",
]

log = logging.getLogger(__name__)

PHI_KEYS = ("phi_1", "phi_2", "phi_3", "phi_4", "phi_5", "phi_6", "phi_7")
FILTER_KINDS = ("explicit-asif", "implicit-asif", "explicit-simplex", "implicit-simplex", "none")
PHI1_FORMS = ("braking", "hocbf")

# Regularises |v| so the speed constraint stays differentiable at rest; it
# moves phi_3 by at most this amount.
SPEED_EPS = 1e-9


class ScenarioError(ValueError):
    pass


def _default_alpha() -> dict[str, tuple[float, float]]:
    return {k: (-2.0, -2.0) for k in PHI_KEYS}


def _default_hocbf_alpha() -> dict[str, tuple[float, float]]:
    return {"phi_1": (-2.0, -3.0), "phi_2": (-2.0, -3.0), "phi_4": (-2.0, -2.0)}


@dataclass
class InspectionConfig:
    u_max: float = 1.0
    mass: float = 12.0
    mean_motion: float = 0.001027
    r_d: float = 5.0
    r_c: float = 5.0
    nu0: float = 0.2
    nu1: Optional[float] = None  # defaults to 4 * mean_motion
    e_s: tuple[float, float, float] = (1.0, 0.0, 0.0)
    theta_s: float = math.pi / 6
    v_max: float = 2.0
    num_deputies: int = 5
    duration: float = 2000.0
    dt: float = 1.0
    seed: int = 0
    filter: str = "explicit-asif"
    # final strengthening (a, b) exponents per constraint
    alpha: dict[str, tuple[float, float]] = field(default_factory=_default_alpha)
    # first-level strengthening for constraints enforced as HOCBFs
    hocbf_alpha: dict[str, tuple[float, float]] = field(default_factory=_default_hocbf_alpha)
    phi1_form: str = "braking"
    brake_fraction: float = 0.5
    # primary LQR
    lqr_q: float = 1.0
    lqr_r: float = 1.0
    target_distance: float = 50.0
    # backup / implicit methods
    backup_horizon: float = 500.0
    backup_dt: float = 1.0
    backup_lqr_r: float = 1e3
    implicit_stride: int = 5
    include_minima: bool = True
    relax_weight: float = qp.RELAX_WEIGHT
    # initial conditions
    init_radius: tuple[float, float] = (100.0, 800.0)
    init_speed_scale: float = 0.5

    def __post_init__(self):
        self.e_s = tuple(float(v) for v in self.e_s)
        self.init_radius = tuple(float(v) for v in self.init_radius)
        self.alpha = {**_default_alpha(), **{k: tuple(v) for k, v in self.alpha.items()}}
        self.hocbf_alpha = {**_default_hocbf_alpha(), **{k: tuple(v) for k, v in self.hocbf_alpha.items()}}
        self.validate()

    @property
    def nu1_value(self) -> float:
        return 4.0 * self.mean_motion if self.nu1 is None else self.nu1

    def validate(self) -> None:
        def need(cond: bool, name: str, msg: str) -> None:
            if not cond:
                raise ScenarioError(f"{name}: {msg}")

        for name in ("u_max", "mass", "mean_motion", "r_d", "r_c", "nu0", "v_max", "duration", "dt", "theta_s"):
            need(getattr(self, name) > 0, name, "must be positive")
        need(self.nu1_value > 0, "nu1", "must be positive")
        need(isinstance(self.num_deputies, int) and self.num_deputies >= 1, "num_deputies", "must be an integer >= 1")
        need(len(self.e_s) == 3, "e_s", "must have three components")
        need(abs(math.sqrt(sum(v * v for v in self.e_s)) - 1.0) <= 1e-12, "e_s", "must be a unit vector")
        steps = self.duration / self.dt
        need(abs(steps - round(steps)) <= 1e-9, "duration", "must be a whole number of dt steps")
        need(self.filter in FILTER_KINDS, "filter", f"must be one of {', '.join(FILTER_KINDS)}")
        need(self.phi1_form in PHI1_FORMS, "phi1_form", f"must be one of {', '.join(PHI1_FORMS)}")
        need(0 < self.brake_fraction < 1, "brake_fraction", "must lie in (0, 1)")
        need(self.backup_horizon > 0 and self.backup_dt > 0, "backup_horizon", "horizon and step must be positive")
        need(self.implicit_stride >= 1, "implicit_stride", "must be >= 1")
        need(self.lqr_q > 0 and self.lqr_r > 0 and self.backup_lqr_r > 0, "lqr_r", "LQR weights must be positive")
        need(0 < self.init_radius[0] < self.init_radius[1], "init_radius", "needs 0 < min < max")
        need(0 < self.init_speed_scale <= 1, "init_speed_scale", "must lie in (0, 1]")
        need(self.relax_weight > 0, "relax_weight", "must be positive")
        for key, table in (("alpha", self.alpha), ("hocbf_alpha", self.hocbf_alpha)):
            for k, ab in table.items():
                need(k in PHI_KEYS, key, f"unknown constraint {k!r}")
                need(len(ab) == 2, f"{key}.{k}", "needs two exponents (a, b)")

    def with_overrides(self, **kw) -> "InspectionConfig":
        known = {f.name for f in fields(self)}
        unknown = set(kw) - known
        if unknown:
            raise ScenarioError(f"unknown config fields: {sorted(unknown)}")
        return replace(self, **kw)


# -- constraints ----------------------------------------------------------


def _alpha(cfg: InspectionConfig, key: str) -> StrengtheningFn:
    return StrengtheningFn(*cfg.alpha[key])


def _speed(v):
    return ad.sqrt(ad.dot(v, v) + SPEED_EPS * SPEED_EPS) - SPEED_EPS


def make_constraints(cfg: InspectionConfig, deputy_index: int) -> list[SafetyConstraint]:
    """Allowable-set constraints of one deputy: phi_1, phi_2 (per other deputy), phi_3..phi_7."""
    N = cfg.num_deputies
    if N < 1:
        raise ScenarioError("num_deputies must be >= 1")
    if not 0 <= deputy_index < N:
        raise ScenarioError(f"deputy_index {deputy_index} out of range for {N} deputies")
    dim = 6 * N
    o = 6 * deputy_index
    e_s = np.array(cfg.e_s)
    r_coll = cfg.r_d + cfg.r_c
    nu0, nu1 = cfg.nu0, cfg.nu1_value
    cos_half = math.cos(cfg.theta_s / 2.0)
    vmax2 = cfg.v_max**2

    def pos(x):
        return x[..., o : o + 3]

    def vel(x):
        return x[..., o + 3 : o + 6]

    def make(key, fn, name=None, share=1.0):
        return SafetyConstraint(
            name or key, ad.DiffScalarField(fn, dim), _alpha(cfg, key), "allowable", True, share
        )

    out = [make("phi_1", lambda x: ad.norm(pos(x)) - r_coll)]
    for j in range(N):
        if j == deputy_index:
            continue
        oj = 6 * j
        out.append(
            make(
                "phi_2",
                lambda x, oj=oj: ad.norm(pos(x) - x[..., oj : oj + 3]) - 2.0 * cfg.r_d,
                name=f"phi_2[{j}]",
                # both deputies of a pair filter against this constraint
                share=0.5,
            )
        )
    out.append(make("phi_3", lambda x: nu0 + nu1 * ad.norm(pos(x)) - _speed(vel(x))))
    out.append(make("phi_4", lambda x: -ad.dot(pos(x), e_s) / ad.norm(pos(x)) + cos_half))
    for k, key in enumerate(("phi_5", "phi_6", "phi_7")):
        out.append(make(key, lambda x, k=k: vmax2 - vel(x)[..., k] * vel(x)[..., k]))
    return out


def _base_key(c: SafetyConstraint) -> str:
    return c.name.split("[")[0]


def explicit_constraints(cfg: InspectionConfig, deputy_index: int, dyn=None) -> list[SafetyConstraint]:
    """Constraints the explicit filters enforce for one deputy.

    phi_2 and phi_4 have relative degree 2 and go through the HOCBF
    construction. phi_1 is either a HOCBF as well, or a relative-degree-1
    braking-distance form ``sqrt(2 a (|p| - r)) + p_hat . v``.
    Velocity constraints are used directly.
    """
    if dyn is None:
        dyn = cw_system(CwParams(cfg.mean_motion, cfg.mass, cfg.num_deputies, deputy_index))
    raw = make_constraints(cfg, deputy_index)
    out = []
    for c in raw:
        key = _base_key(c)
        if key in ("phi_2", "phi_4") or (key == "phi_1" and cfg.phi1_form == "hocbf"):
            out.append(hocbf_transform(c, dyn, 2, [StrengtheningFn(*cfg.hocbf_alpha[key])]))
        elif key == "phi_1":
            out.append(_braking_phi1(cfg, deputy_index, c))
        else:
            out.append(c)
    return out


def _braking_phi1(cfg: InspectionConfig, deputy_index: int, raw: SafetyConstraint) -> SafetyConstraint:
    o = 6 * deputy_index
    a_brake = cfg.brake_fraction * cfg.u_max / cfg.mass
    r_coll = cfg.r_d + cfg.r_c
    eps = 1e-2  # m/s; keeps sqrt differentiable at the boundary

    def h(x):
        p = x[..., o : o + 3]
        v = x[..., o + 3 : o + 6]
        r = ad.norm(p)
        radial_speed = ad.dot(p, v) / r
        return ad.sqrt(2.0 * a_brake * (r - r_coll) + eps * eps) - eps + radial_speed

    return SafetyConstraint("phi_1_braking", ad.DiffScalarField(h, raw.h.input_dim), raw.alpha, vectorized=True)


def phi_values(cfg: InspectionConfig, states: np.ndarray, deputy_index: int) -> np.ndarray:
    """phi_1..phi_7 for one deputy; phi_2 is the minimum over the other deputies."""
    x = np.asarray(states, dtype=float).reshape(-1)
    vals = {k: [] for k in PHI_KEYS}
    for c in make_constraints(cfg, deputy_index):
        vals[_base_key(c)].append(c.evaluate(x))
    return np.array([min(vals[k]) if vals[k] else math.inf for k in PHI_KEYS])


# -- controllers ----------------------------------------------------------


def lqr_gain(cfg: InspectionConfig, q: float, r: float, dt: float) -> np.ndarray:
    A, B = cw_matrices(cfg.mean_motion, cfg.mass)
    return dlqr(A, B, q * np.eye(6), r * np.eye(3), dt)


def lqr_primary(cfg: InspectionConfig, target_state=None) -> Callable[[np.ndarray], np.ndarray]:
    """Unsaturated ``u = -K (x_i - target)``; saturation is left to the RTA.

    The default target sits ``target_distance`` metres from the chief on the
    anti-sun axis.
    """
    if target_state is None:
        target_state = np.concatenate([-cfg.target_distance * np.array(cfg.e_s), np.zeros(3)])
    target = np.asarray(target_state, dtype=float)
    K = lqr_gain(cfg, cfg.lqr_q, cfg.lqr_r, cfg.dt)

    def controller(x_i):
        return -K @ (np.asarray(x_i, dtype=float) - target)

    controller.K = K
    controller.target = target
    return controller


def make_backup(cfg: InspectionConfig, deputy_index: int) -> StationKeepingBackup:
    K = lqr_gain(cfg, 1.0, cfg.backup_lqr_r, cfg.backup_dt)
    return StationKeepingBackup(K, cfg.mean_motion, cfg.mass, cfg.u_max, deputy_index)


def make_filter(cfg: InspectionConfig, deputy_index: int) -> Optional[RtaModule]:
    """RTA instance for one deputy, or ``None`` when filtering is disabled."""
    if cfg.filter == "none":
        return None
    dyn = cw_system(CwParams(cfg.mean_motion, cfg.mass, cfg.num_deputies, deputy_index))
    lo = -cfg.u_max * np.ones(3)
    hi = cfg.u_max * np.ones(3)
    if cfg.filter == "explicit-asif":
        rta = ExplicitAsif(dyn, explicit_constraints(cfg, deputy_index, dyn), lo, hi, sample_period=cfg.dt)
    elif cfg.filter == "explicit-simplex":
        enforced = explicit_constraints(cfg, deputy_index, dyn)
        raw = [c for c in make_constraints(cfg, deputy_index) if _base_key(c) in ("phi_1", "phi_2", "phi_4")]
        rta = ExplicitSimplex(dyn, enforced + raw, make_backup(cfg, deputy_index), cfg.dt, lo, hi)
    elif cfg.filter == "implicit-simplex":
        rta = ImplicitSimplex(
            dyn, make_constraints(cfg, deputy_index), make_backup(cfg, deputy_index), cfg.dt, lo, hi,
            cfg.backup_horizon, cfg.backup_dt,
        )
    else:
        rta = ImplicitAsif(
            dyn, make_constraints(cfg, deputy_index), make_backup(cfg, deputy_index), lo, hi,
            cfg.backup_horizon, cfg.backup_dt, cfg.implicit_stride, cfg.include_minima,
        )
    if isinstance(rta, (ExplicitAsif, ImplicitAsif)) and cfg.relax_weight != qp.RELAX_WEIGHT:
        rta.relax_weight = cfg.relax_weight
    return rta


# -- initial conditions ---------------------------------------------------


def initial_states(cfg: InspectionConfig, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    """Seeded random deputy states inside the allowable set.

    Radius uniform in ``init_radius``, direction uniform on the sphere outside
    the sun cone, velocity uniform in the ball of radius
    ``init_speed_scale * (nu0 + nu1 |p|)``. Draws are rejected until every
    deputy also satisfies the explicit constraints the filters enforce.
    """
    N = cfg.num_deputies
    checks = [explicit_constraints(cfg, i) + make_constraints(cfg, i) for i in range(N)]
    e_s = np.array(cfg.e_s)
    cos_half = math.cos(cfg.theta_s / 2.0)
    for _ in range(max_tries):
        X = np.zeros((N, 6))
        for i in range(N):
            while True:
                d = rng.normal(size=3)
                d /= np.linalg.norm(d)
                if cos_half - d @ e_s > 0.05:
                    break
            r = rng.uniform(*cfg.init_radius)
            vr = cfg.init_speed_scale * (cfg.nu0 + cfg.nu1_value * r) * rng.uniform() ** (1.0 / 3.0)
            w = rng.normal(size=3)
            w /= np.linalg.norm(w)
            X[i, :3] = r * d
            X[i, 3:] = vr * w
        x = X.reshape(-1)
        # the braking form is NaN inside the keep-out zone; NaN > 0 rejects the draw
        with np.errstate(invalid="ignore"):
            ok = all(c.evaluate(x) > 0.0 for cs in checks for c in cs)
        if ok:
            return X
    raise ScenarioError("could not draw a safe initial configuration")


# -- simulation -----------------------------------------------------------


@dataclass(frozen=True)
class LogRow:
    time: float
    deputy: int
    state: tuple[float, ...]
    u_des: tuple[float, ...]
    u_act: tuple[float, ...]
    intervening: bool
    phi: tuple[float, ...]
    qp_status: str


@dataclass
class SimulationLog:
    rows: list[LogRow]
    final_states: np.ndarray
    final_phi: np.ndarray  # (N, 7)
    wall_clock_s: float = 0.0
    # process CPU time; unaffected by other load on the machine
    cpu_time_s: float = 0.0

    def phi_matrix(self) -> np.ndarray:
        return np.array([r.phi for r in self.rows]).reshape(-1, len(PHI_KEYS))

    def min_phi(self, include_final: bool = True) -> dict[str, float]:
        M = self.phi_matrix()
        if include_final and len(self.final_phi):
            M = np.vstack([M, self.final_phi])
        return {k: float(np.min(M[:, i])) if len(M) else math.inf for i, k in enumerate(PHI_KEYS)}

    def summary(self) -> dict:
        mins = self.min_phi()
        u = np.array([r.u_act for r in self.rows]).reshape(-1, 3)
        return {
            "rows": len(self.rows),
            "min_phi": min(mins.values()),
            "min_phi_by_constraint": mins,
            "interventions": sum(r.intervening for r in self.rows),
            "qp_relaxations": sum(r.qp_status == qp.QpStatus.RELAXED.value for r in self.rows),
            "max_abs_u_act": float(np.max(np.abs(u))) if len(u) else 0.0,
            "wall_clock_s": self.wall_clock_s,
            "cpu_time_s": self.cpu_time_s,
        }


def run_simulation(
    cfg: InspectionConfig,
    primary: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    x0: Optional[np.ndarray] = None,
) -> SimulationLog:
    """Run the inspection scenario.

    Deputies act sequentially in index order inside each step; each one sees
    the already-advanced states of the deputies before it.
    ``primary(i, x_i)`` overrides the LQR primary controller.
    """
    start = time.perf_counter()
    cpu_start = time.process_time()
    N = cfg.num_deputies
    rng = np.random.default_rng(cfg.seed)
    X = initial_states(cfg, rng) if x0 is None else np.array(x0, dtype=float).reshape(N, 6)
    if primary is None:
        lqr = lqr_primary(cfg)
        primary = lambda i, xi: lqr(xi)  # noqa: E731
    filters = [make_filter(cfg, i) for i in range(N)]
    plant = cw_system(CwParams(cfg.mean_motion, cfg.mass, 1, 0))
    raw = [make_constraints(cfg, i) for i in range(N)]
    steps = int(round(cfg.duration / cfg.dt))

    def phis(snapshot: np.ndarray, i: int) -> tuple[float, ...]:
        vals = {k: [] for k in PHI_KEYS}
        for c in raw[i]:
            vals[_base_key(c)].append(c.evaluate(snapshot))
        return tuple(min(vals[k]) if vals[k] else math.inf for k in PHI_KEYS)

    rows: list[LogRow] = []
    for step in range(steps):
        t = step * cfg.dt
        snapshot = X.reshape(-1).copy()
        for i in range(N):
            x_i = X[i].copy()
            u_des = np.asarray(primary(i, x_i), dtype=float)
            rta = filters[i]
            try:
                if rta is None:
                    u_act, intervening, status = u_des.copy(), False, "n/a"
                else:
                    u_act = rta.filter(X.reshape(-1).copy(), u_des, t)
                    intervening, status = rta.intervening, rta.status
            except Exception as exc:
                raise RuntimeError(f"filter failed at t={t} deputy={i}: {exc}") from exc
            rows.append(
                LogRow(t, i, tuple(x_i), tuple(u_des), tuple(u_act), intervening, phis(snapshot, i), status)
            )
            X[i] = plant.propagate(x_i, u_act, cfg.dt)
    final = X.reshape(-1).copy()
    final_phi = np.array([phis(final, i) for i in range(N)])
    return SimulationLog(rows, X.copy(), final_phi, time.perf_counter() - start, time.process_time() - cpu_start)
