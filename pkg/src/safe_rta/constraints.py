"""Safety constraints ``h(x) >= 0``, class-kappa strengthening and HOCBFs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dynamics import ControlAffineDynamics

__all__ = [
    "ConstraintError",
    "StrengtheningFn",
    "SafetyConstraint",
    "in_allowable_set",
    "hocbf_transform",
    "MEMBERSHIP_TOL",
]

MEMBERSHIP_TOL = 1e-9


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class StrengtheningFn:
    """Polynomial class-kappa function ``10**a * z + 10**b * z**3``."""

    a: float = -2.0
    b: float = -2.0

    def __call__(self, z: Any) -> Any:
        return 10.0**self.a * z + 10.0**self.b * (z * z * z)


# Any strictly increasing callable with alpha(0) == 0 may stand in for
# StrengtheningFn; it has to accept duals if the constraint is differentiated.
ClassKappa = Callable[[Any], Any]


@dataclass(frozen=True)
class SafetyConstraint:
    """A named scalar field with its strengthening function.

    ``vectorized`` declares that ``h`` also maps a stack of states of shape
    ``(m, n)`` to ``(m,)``; filters use it to evaluate whole trajectories in
    one call.

    ``responsibility`` is the share of the barrier condition this controller
    enforces. A constraint coupling two independently filtered agents (both
    enforcing it, each treating the other as drifting) uses 0.5 so that the
    two shares add up to the full condition.
    """

    name: str
    h: ad.DiffScalarField
    alpha: ClassKappa = field(default_factory=StrengtheningFn)
    role: str = "explicit"
    vectorized: bool = False
    responsibility: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.responsibility <= 1.0:
            raise ConstraintError(f"constraint {self.name!r}: responsibility must lie in (0, 1]")

    def _wrap(self, exc: Exception) -> ConstraintError:
        return ConstraintError(f"constraint {self.name!r}: {exc}")

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.h.input_dim,):
            raise ConstraintError(
                f"constraint {self.name!r} expects a state of dimension {self.h.input_dim}, got shape {x.shape}"
            )
        try:
            return float(self.h(x))
        except (ad.AutodiffError, FloatingPointError, ZeroDivisionError) as exc:
            raise self._wrap(exc) from exc

    def evaluate_many(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if self.vectorized:
            try:
                return np.asarray(self.h(xs), dtype=float)
            except ad.AutodiffError as exc:
                raise self._wrap(exc) from exc
        return np.array([self.evaluate(x) for x in xs])

    def value_and_gradient(self, x) -> tuple[float, np.ndarray]:
        try:
            value, grad = ad.value_and_gradient(self.h, x)
        except ad.AutodiffError as exc:
            raise self._wrap(exc) from exc
        return float(value), np.asarray(grad)

    def gradient(self, x) -> np.ndarray:
        return self.value_and_gradient(x)[1]

    def values_and_gradients(self, xs) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(m,)`` and gradients ``(m, n)`` at each row of ``xs``."""
        xs = np.asarray(xs, dtype=float)
        if self.vectorized:
            try:
                return ad.batch_value_and_gradient(self.h, xs)
            except ad.AutodiffError as exc:
                raise self._wrap(exc) from exc
        pairs = [self.value_and_gradient(x) for x in xs]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]).reshape(len(xs), -1)


def in_allowable_set(
    constraints: Sequence[SafetyConstraint], x, tol: float = MEMBERSHIP_TOL
) -> tuple[bool, dict[str, float]]:
    values = {c.name: c.evaluate(x) for c in constraints}
    return all(v >= -tol for v in values.values()), values


def hocbf_transform(
    c: SafetyConstraint,
    dyn: ControlAffineDynamics,
    rel_degree: int,
    alphas: Sequence[ClassKappa],
) -> SafetyConstraint:
    """Build ``Psi_{r-1}`` from ``Psi_i = grad(Psi_{i-1}) . f + alpha_i(Psi_{i-1})``.

    The returned constraint keeps ``c.alpha`` as the strengthening applied by
    the barrier-row builder on the last level.
    """
    if rel_degree < 1:
        raise ConstraintError(f"relative degree must be >= 1, got {rel_degree}")
    if len(alphas) != rel_degree - 1:
        raise ConstraintError(f"need {rel_degree - 1} intermediate alphas, got {len(alphas)}")
    if rel_degree == 1:
        return c

    psi = c.h
    for alpha_i in alphas:
        psi = ad.DiffScalarField(_psi_step(psi, dyn, alpha_i), c.h.input_dim)
    return replace(c, name=f"{c.name}_hocbf{rel_degree}", h=psi, vectorized=False)


def _psi_step(prev: ad.DiffScalarField, dyn: ControlAffineDynamics, alpha_i: ClassKappa):
    def psi(x):
        value, lie = ad.value_and_jvp(prev, x, dyn.f(x))
        return lie + alpha_i(value)

    return psi
