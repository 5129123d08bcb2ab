"""Forward-mode automatic differentiation on numpy arrays.

A :class:`Dual` carries a primal array of shape ``S`` and a tangent array of
shape ``S + (k,)``: ``k`` directional derivatives are pushed through a single
evaluation. ``k == 1`` is an ordinary JVP, ``k == n`` with identity seeds
gives a full Jacobian. Every tangent column follows the same elementwise float
operations, and reductions are done with explicit sequential loops, so a JVP
along ``e_j`` reproduces column ``j`` of the Jacobian bit for bit.

Duals nest: the primal and tangent of a dual may themselves be duals of an
outer differentiation. Each differentiation call draws a fresh ``tag`` and a
dual with a higher tag always wraps the lower ones, which keeps nested
derivatives (HOCBFs, derivatives of Lie derivatives) free of perturbation
confusion.

Functions in this module accept plain floats / arrays too, so one constraint
implementation serves both cheap evaluation and differentiation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "DomainError",
    "NonFiniteError",
    "Dual",
    "DiffScalarField",
    "primal",
    "sqrt",
    "sin",
    "cos",
    "exp",
    "log",
    "minimum",
    "maximum",
    "clip",
    "where",
    "dot",
    "norm",
    "vsum",
    "stack",
    "concatenate",
    "gradient",
    "value_and_gradient",
    "jacobian",
    "value_and_jacobian",
    "jvp",
    "value_and_jvp",
    "batch_value_and_gradient",
    "batch_value_and_jacobian",
]

_tags = itertools.count(1)


class AutodiffError(ValueError):
    """Base class for differentiation failures."""


class DomainError(AutodiffError):
    """A primitive was evaluated where it has no derivative."""


class NonFiniteError(AutodiffError):
    """A value or derivative came out as inf/nan."""

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


def primal(x: Any) -> Any:
    """Strip every dual layer and return the underlying float array."""
    while isinstance(x, Dual):
        x = x.value
    return x


def _tag(x: Any) -> int:
    return x.tag if type(x) is Dual else 0


def _shape(x: Any) -> tuple[int, ...]:
    s = getattr(x, "shape", None)
    return np.shape(x) if s is None else s


def _any(mask: Any) -> bool:
    # ndarray and numpy scalars have .any(); plain bools do not
    any_ = getattr(mask, "any", None)
    return bool(mask) if any_ is None else bool(any_())


def _ex(x: Any) -> Any:
    """Append a unit trailing axis so ``x`` broadcasts against tangents."""
    if isinstance(x, Dual):
        return x[..., None]
    return np.asarray(x, dtype=float)[..., None]


def _bcast(t: Any, shape: tuple[int, ...]) -> Any:
    if isinstance(t, Dual):
        return Dual(_bcast(t.value, shape), _bcast(t.tangent, shape + (t.k,)), t.tag)
    return np.broadcast_to(t, shape)


def _zeros_like_tangent(value: Any, k: int) -> np.ndarray:
    return np.zeros(_shape(value) + (k,))


def _lift(c: Any, tag: int, k: int) -> "Dual":
    """Treat ``c`` as a constant with respect to differentiation ``tag``."""
    if not isinstance(c, Dual):
        c = np.asarray(c, dtype=float)
    return Dual(c, _zeros_like_tangent(c, k), tag)


class Dual:
    """Primal value with ``k`` tangent directions along a trailing axis."""

    __slots__ = ("value", "tangent", "tag")
    # Makes ndarray defer to our reflected operators (ndarray @ Dual, etc.).
    __array_ufunc__ = None

    def __init__(self, value: Any, tangent: Any, tag: int):
        self.value = value
        self.tangent = tangent
        self.tag = tag

    # -- structure ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return _shape(self.value)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def k(self) -> int:
        return _shape(self.tangent)[-1]

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Dual(value={primal(self)!r}, k={self.k}, tag={self.tag})"

    def __getitem__(self, key: Any) -> "Dual":
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.value[key], self.tangent[key + (slice(None),)], self.tag)

    def reshape(self, *shape: Any) -> "Dual":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        new_value = self.value.reshape(shape)
        return Dual(new_value, self.tangent.reshape(_shape(new_value) + (self.k,)), self.tag)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other: Any) -> Any:
        return _add(self, other)

    def __radd__(self, other: Any) -> Any:
        return _add(other, self)

    def __sub__(self, other: Any) -> Any:
        return _add(self, -other if isinstance(other, Dual) else -np.asarray(other, dtype=float))

    def __rsub__(self, other: Any) -> Any:
        return _add(other, -self)

    def __neg__(self) -> "Dual":
        return Dual(-self.value, -self.tangent, self.tag)

    def __pos__(self) -> "Dual":
        return self

    def __mul__(self, other: Any) -> Any:
        return _mul(self, other)

    def __rmul__(self, other: Any) -> Any:
        return _mul(other, self)

    def __truediv__(self, other: Any) -> Any:
        return _div(self, other)

    def __rtruediv__(self, other: Any) -> Any:
        return _div(other, self)

    def __pow__(self, p: Any) -> Any:
        return _pow(self, p)

    def __rpow__(self, base: Any) -> Any:
        return _pow(base, self)

    def __matmul__(self, other: Any) -> Any:
        return _matmul(self, other)

    def __rmatmul__(self, other: Any) -> Any:
        return _matmul(other, self)

    # Comparisons act on primal values only; they never carry derivatives.
    def __lt__(self, other: Any) -> Any:
        return primal(self) < primal(other)

    def __le__(self, other: Any) -> Any:
        return primal(self) <= primal(other)

    def __gt__(self, other: Any) -> Any:
        return primal(self) > primal(other)

    def __ge__(self, other: Any) -> Any:
        return primal(self) >= primal(other)

    def __float__(self) -> float:
        return float(primal(self))


# -- binary rules ---------------------------------------------------------


def _add(a: Any, b: Any) -> Any:
    ta, tb = _tag(a), _tag(b)
    if ta == tb == 0:
        return a + b
    if ta == tb:
        return Dual(a.value + b.value, a.tangent + b.tangent, ta)
    if ta < tb:
        a, b = b, a
    # a is the dual, b is constant for this tag
    value = a.value + b
    shape = _shape(value)
    tangent = a.tangent
    if shape != a.shape:
        tangent = _bcast(tangent, shape + (a.k,))
    return Dual(value, tangent, a.tag)


def _mul(a: Any, b: Any) -> Any:
    ta, tb = _tag(a), _tag(b)
    if ta == tb == 0:
        return a * b
    if ta == tb:
        return Dual(a.value * b.value, a.tangent * _ex(b.value) + _ex(a.value) * b.tangent, ta)
    if ta < tb:
        a, b = b, a
    return Dual(a.value * b, a.tangent * _ex(b), a.tag)


def _div(a: Any, b: Any) -> Any:
    ta, tb = _tag(a), _tag(b)
    if ta == tb == 0:
        return a / b
    if _any(primal(b) == 0.0):
        raise DomainError("division by zero")
    if ta > tb:
        # b constant
        return Dual(a.value / b, a.tangent / _ex(b), ta)
    if tb > ta:
        # a constant: d(a/b) = -a/b^2 db
        q = a / b.value
        return Dual(q, -(_ex(q) * b.tangent) / _ex(b.value), tb)
    q = a.value / b.value
    return Dual(q, (a.tangent - _ex(q) * b.tangent) / _ex(b.value), ta)


def _pow(a: Any, p: Any) -> Any:
    if isinstance(p, Dual):
        return exp(p * log(a))
    if not isinstance(a, Dual):
        return np.power(a, p)
    p = float(p)
    if p == 0.0:
        return _lift(np.ones(a.shape), a.tag, a.k)
    if p == 1.0:
        return a
    if p == 2.0:
        return a * a
    if p == int(p) and p > 0:
        # repeated multiplication keeps the float path exact for small powers
        n = int(p)
        out = a
        for _ in range(n - 1):
            out = out * a
        return out
    base = primal(a)
    if np.any(base < 0.0) or (p < 1.0 and np.any(base == 0.0)):
        raise DomainError(f"power {p} undefined or non-differentiable at base {base}")
    value = a.value**p
    return Dual(value, a.tangent * _ex(p * a.value ** (p - 1.0)), a.tag)


def _matmul(a: Any, b: Any) -> Any:
    ta, tb = _tag(a), _tag(b)
    if ta == tb == 0:
        return np.asarray(a) @ np.asarray(b)
    if ta == tb:
        if a.ndim == 1 and b.ndim == 1:
            return dot(a, b)
        raise TypeError("dual @ dual is only supported for 1-D operands")
    if ta > tb:
        # dual @ const
        b = np.asarray(b, dtype=float) if not isinstance(b, Dual) else b
        bs = _shape(b)
        if a.ndim != 1 or len(bs) not in (1, 2):
            raise TypeError("dual @ const needs a 1-D dual and a 1-D/2-D constant")
        value = a.value @ b
        acc = a.tangent[0] * (b[0] if len(bs) == 1 else _ex(b[0]))
        for j in range(1, bs[0]):
            acc = acc + a.tangent[j] * (b[j] if len(bs) == 1 else _ex(b[j]))
        return Dual(value, acc, ta)
    # const @ dual
    a = np.asarray(a, dtype=float) if not isinstance(a, Dual) else a
    as_ = _shape(a)
    if b.ndim != 1 or len(as_) != 2:
        raise TypeError("const @ dual needs a 2-D constant and a 1-D dual")
    value = a @ b.value
    acc = _ex(a[:, 0]) * b.tangent[0]
    for j in range(1, as_[1]):
        acc = acc + _ex(a[:, j]) * b.tangent[j]
    return Dual(value, acc, tb)


# -- unary primitives -----------------------------------------------------


def _unary(x: Dual, value: Any, deriv: Any) -> Dual:
    return Dual(value, x.tangent * _ex(deriv), x.tag)


def sqrt(x: Any) -> Any:
    if not isinstance(x, Dual):
        return np.sqrt(x)
    base = primal(x)
    if _any(base <= 0.0):
        raise DomainError(f"sqrt is not differentiable at {base}")
    s = sqrt(x.value)
    return _unary(x, s, 0.5 / s)


def sin(x: Any) -> Any:
    if not isinstance(x, Dual):
        return np.sin(x)
    return _unary(x, sin(x.value), cos(x.value))


def cos(x: Any) -> Any:
    if not isinstance(x, Dual):
        return np.cos(x)
    return _unary(x, cos(x.value), -sin(x.value))


def exp(x: Any) -> Any:
    if not isinstance(x, Dual):
        return np.exp(x)
    e = exp(x.value)
    return _unary(x, e, e)


def log(x: Any) -> Any:
    if not isinstance(x, Dual):
        return np.log(x)
    base = primal(x)
    if _any(base <= 0.0):
        raise DomainError(f"log undefined at {base}")
    return _unary(x, log(x.value), 1.0 / x.value)


def where(mask: Any, a: Any, b: Any) -> Any:
    """Elementwise select; ``mask`` is a plain boolean array."""
    ta, tb = _tag(a), _tag(b)
    if ta == tb == 0:
        return np.where(mask, a, b)
    tag = max(ta, tb)
    k = a.k if ta == tag else b.k
    if ta != tag:
        a = _lift(a, tag, k)
    if tb != tag:
        b = _lift(b, tag, k)
    mask = np.asarray(mask)
    shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    value = where(mask, a.value, b.value)
    ta_, tb_ = a.tangent, b.tangent
    if a.shape != shape:
        ta_ = _bcast(ta_, shape + (k,))
    if b.shape != shape:
        tb_ = _bcast(tb_, shape + (k,))
    return Dual(value, where(mask[..., None], ta_, tb_), tag)


def minimum(a: Any, b: Any) -> Any:
    """Elementwise min; on ties the first argument's derivative is used."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.minimum(a, b)
    return where(primal(a) <= primal(b), a, b)


def maximum(a: Any, b: Any) -> Any:
    """Elementwise max; on ties the first argument's derivative is used."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.maximum(a, b)
    return where(primal(a) >= primal(b), a, b)


def clip(x: Any, lo: Any, hi: Any) -> Any:
    return minimum(maximum(x, lo), hi)


# -- reductions -----------------------------------------------------------


def vsum(x: Any, axis: int = -1) -> Any:
    """Sum along ``axis`` with a fixed left-to-right accumulation order."""
    if not isinstance(x, Dual):
        x = np.asarray(x, dtype=float)
    nd = len(_shape(x))
    axis = axis % nd
    n = _shape(x)[axis]
    lead = (slice(None),) * axis
    acc = x[lead + (0,)]
    for i in range(1, n):
        acc = acc + x[lead + (i,)]
    return acc


def dot(a: Any, b: Any) -> Any:
    """Inner product over the last axis (batched over leading axes)."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return vsum(a * b)
    return vsum(a * b)


def norm(x: Any) -> Any:
    """Euclidean norm over the last axis. Differentiating at zero is an error."""
    if not isinstance(x, Dual):
        return np.sqrt(dot(x, x))
    sq = dot(x, x)
    if _any(primal(sq) == 0.0):
        raise DomainError("norm is not differentiable at the zero vector")
    return sqrt(sq)


# -- assembly -------------------------------------------------------------


def concatenate(parts: Sequence[Any], axis: int = 0) -> Any:
    tags = [_tag(p) for p in parts]
    tag = max(tags)
    if tag == 0:
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=axis)
    k = next(p.k for p in parts if _tag(p) == tag)
    lifted = [p if _tag(p) == tag else _lift(p, tag, k) for p in parts]
    nd = lifted[0].ndim
    axis = axis % nd
    value = concatenate([p.value for p in lifted], axis=axis)
    tangent = concatenate([p.tangent for p in lifted], axis=axis)
    return Dual(value, tangent, tag)


def stack(parts: Sequence[Any], axis: int = 0) -> Any:
    nd = len(_shape(parts[0]))
    axis = axis % (nd + 1)
    expanded = []
    for p in parts:
        key = (slice(None),) * axis + (None,)
        expanded.append(p[key] if isinstance(p, Dual) else np.asarray(p, dtype=float)[key])
    return concatenate(expanded, axis=axis)


# -- differentiation drivers ----------------------------------------------


@dataclass(frozen=True)
class DiffScalarField:
    """Scalar function of a state vector, written with this module's primitives."""

    evaluator: Callable[[Any], Any]
    input_dim: int

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")

    def __call__(self, x: Any) -> Any:
        return self.evaluator(x)


def _as_input(x: Any, expected: int | None = None) -> Any:
    if not isinstance(x, Dual):
        x = np.asarray(x, dtype=float)
    if len(_shape(x)) != 1:
        raise AutodiffError(f"expected a 1-D input vector, got shape {_shape(x)}")
    if expected is not None and _shape(x)[0] != expected:
        raise AutodiffError(f"input has dimension {_shape(x)[0]}, field expects {expected}")
    return x


def _check_finite(what: str, arr: Any) -> None:
    a = np.asarray(primal(arr))
    if not np.isfinite(a).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0]) if a.ndim else ()
        raise NonFiniteError(f"non-finite {what} at index {bad}", bad)


def _field_fn(field: Any) -> tuple[Callable[[Any], Any], int | None]:
    if isinstance(field, DiffScalarField):
        return field.evaluator, field.input_dim
    return field, None


def _seeded(x: Any, seeds: Any) -> tuple[Dual, int]:
    tag = next(_tags)
    return Dual(x, seeds, tag), tag


def _unwrap(out: Any, tag: int, out_shape_k: tuple[int, ...]) -> tuple[Any, Any]:
    if isinstance(out, Dual) and out.tag == tag:
        return out.value, out.tangent
    # output does not depend on the input at this level
    return out, np.zeros(_shape(out) + out_shape_k)


def value_and_jvp(fn: Callable[[Any], Any], x: Any, v: Any) -> tuple[Any, Any]:
    """Return ``(F(x), J(x) v)`` from one forward pass."""
    fn, dim = _field_fn(fn)
    x = _as_input(x, dim)
    if not isinstance(v, Dual):
        v = np.asarray(v, dtype=float)
    if _shape(v) != _shape(x):
        raise AutodiffError(f"direction shape {_shape(v)} does not match input {_shape(x)}")
    X, tag = _seeded(x, _ex(v))
    value, tangent = _unwrap(fn(X), tag, (1,))
    d = tangent[..., 0]
    if not isinstance(x, Dual) and not isinstance(v, Dual):
        _check_finite("value", value)
        _check_finite("derivative", d)
    return value, d


def jvp(fn: Callable[[Any], Any], x: Any, v: Any) -> Any:
    """Directional derivative ``J(x) v`` of a (vector or scalar) function."""
    return value_and_jvp(fn, x, v)[1]


def value_and_jacobian(fn: Callable[[Any], Any], x: Any) -> tuple[Any, Any]:
    """Return ``(F(x), dF/dx)``; Jacobian rows index outputs, columns inputs."""
    fn, dim = _field_fn(fn)
    x = _as_input(x, dim)
    n = _shape(x)[0]
    X, tag = _seeded(x, np.eye(n))
    value, tangent = _unwrap(fn(X), tag, (n,))
    if not isinstance(x, Dual):
        _check_finite("value", value)
        _check_finite("derivative", tangent)
    return value, tangent


def jacobian(fn: Callable[[Any], Any], x: Any) -> Any:
    return value_and_jacobian(fn, x)[1]


def value_and_gradient(field: Any, x: Any) -> tuple[Any, Any]:
    value, grad = value_and_jacobian(field, x)
    if _shape(value) != ():
        raise AutodiffError(f"gradient needs a scalar function, got output shape {_shape(value)}")
    return value, grad


def gradient(field: Any, x: Any) -> Any:
    """Gradient of a scalar field at ``x``."""
    return value_and_gradient(field, x)[1]


def batch_value_and_gradient(fn: Callable[[Any], Any], xs: Any) -> tuple[np.ndarray, np.ndarray]:
    """Values and gradients of a batch-capable scalar field at rows of ``xs``.

    ``fn`` must map an array of shape ``(..., n)`` to shape ``(...)``.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2:
        raise AutodiffError("batch input must be 2-D")
    m, n = xs.shape
    seeds = np.broadcast_to(np.eye(n), (m, n, n))
    X, tag = _seeded(xs, seeds)
    value, tangent = _unwrap(fn(X), tag, (n,))
    if _shape(value) != (m,):
        raise AutodiffError(f"batched field returned shape {_shape(value)}, expected {(m,)}")
    _check_finite("value", value)
    _check_finite("derivative", tangent)
    return np.asarray(value), np.asarray(tangent)


def batch_value_and_jacobian(fn: Callable[[Any], Any], xs: Any) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(m, p)`` and Jacobians ``(m, p, n)`` of a batch-capable vector field at rows of ``xs``."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2:
        raise AutodiffError("batch input must be 2-D")
    m, n = xs.shape
    seeds = np.broadcast_to(np.eye(n), (m, n, n))
    X, tag = _seeded(xs, seeds)
    value, tangent = _unwrap(fn(X), tag, (n,))
    if len(_shape(value)) != 2 or _shape(value)[0] != m:
        raise AutodiffError(f"batched field returned shape {_shape(value)}, expected ({m}, p)")
    _check_finite("value", value)
    _check_finite("derivative", tangent)
    return np.asarray(value), np.asarray(tangent)
