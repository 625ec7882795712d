"""Posynomial algebra in ordinary and log-transformed coordinates.

A monomial is c * prod_i theta_i**a_i with c > 0 and real exponents a_i; a
posynomial is a sum of monomials. Under theta = exp(u) the log of a
posynomial is a log-sum-exp of affine functions of u, hence convex. That
convexity is what the optimization layer relies on, so log-space
evaluation uses the max-shifted log-sum-exp throughout; exponents as
extreme as theta**-100 must survive round trips.

Terms are never collected: adding theta1 + theta1 keeps two terms. The
algebra only ever needs positivity and convexity, not canonical forms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
from numpy.typing import NDArray

__all__ = ["Monomial", "Posynomial", "Zero", "ZERO", "PosyOrZero", "add", "mul", "scale"]


@dataclass(frozen=True)
class Monomial:
    coeff: float
    exponents: tuple[float, ...]

    def __post_init__(self):
        if not (np.isfinite(self.coeff) and self.coeff > 0.0):
            raise ValueError(f"monomial coefficient must be finite and positive, got {self.coeff}")
        object.__setattr__(self, "exponents", tuple(float(a) for a in self.exponents))
        if not all(np.isfinite(a) for a in self.exponents):
            raise ValueError("monomial exponents must be finite")

    @property
    def dim(self) -> int:
        return len(self.exponents)


class Zero:
    """The zero function, the absorbing element the monoid is missing.

    Posynomial coefficients are strictly positive, so the zero function
    needs its own representative. All entries of a mode matrix that do not
    depend on the decision variables use it.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def eval(self, theta) -> float:
        return 0.0

    def __repr__(self) -> str:
        return "ZERO"


ZERO = Zero()

PosyOrZero = Union["Posynomial", Zero]


class Posynomial:
    """An immutable sum of monomials over a fixed variable dimension."""

    __slots__ = ("terms", "dim", "_logc", "_expo")

    def __init__(self, terms: Iterable[Monomial]):
        terms = tuple(terms)
        if not terms:
            raise ValueError("a posynomial needs at least one term; use ZERO for none")
        dims = {t.dim for t in terms}
        if len(dims) != 1:
            raise ValueError(f"inconsistent term dimensions {sorted(dims)}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "dim", dims.pop())
        object.__setattr__(self, "_logc", np.log([t.coeff for t in terms]))
        object.__setattr__(self, "_expo", np.array([t.exponents for t in terms], dtype=float))

    def __setattr__(self, name, value):
        raise AttributeError("Posynomial is immutable")

    @classmethod
    def monomial(cls, coeff: float, exponents) -> "Posynomial":
        return cls([Monomial(coeff, tuple(exponents))])

    @classmethod
    def constant(cls, value: float, dim: int) -> "Posynomial":
        return cls.monomial(value, (0.0,) * dim)

    def _check_point(self, point, name: str) -> NDArray[np.float64]:
        p = np.asarray(point, dtype=float).ravel()
        if p.size != self.dim:
            raise ValueError(f"{name} has length {p.size}, expected {self.dim}")
        return p

    def eval(self, theta) -> float:
        """Value at theta > 0 (entrywise)."""
        theta = self._check_point(theta, "theta")
        if np.any(theta <= 0.0):
            raise ValueError("theta must be entrywise positive")
        # Per-term exp(log c + a . log theta): same sum, immune to the
        # intermediate overflow a direct power product can hit.
        return float(np.sum(np.exp(self._logc + self._expo @ np.log(theta))))

    def log_eval(self, u) -> float:
        """log of the value at theta = exp(u), via max-shifted log-sum-exp."""
        u = self._check_point(u, "u")
        z = self._logc + self._expo @ u
        zmax = z.max()
        return float(zmax + np.log(np.sum(np.exp(z - zmax))))

    def log_eval_grad(self, u) -> NDArray[np.float64]:
        """Gradient of log_eval at u: softmax-weighted average of exponents."""
        u = self._check_point(u, "u")
        z = self._logc + self._expo @ u
        z -= z.max()
        w = np.exp(z)
        w /= w.sum()
        return w @ self._expo

    def __add__(self, other: PosyOrZero) -> "Posynomial":
        if isinstance(other, Zero):
            return self
        if not isinstance(other, Posynomial):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError("dimension mismatch in posynomial sum")
        return Posynomial(self.terms + other.terms)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Zero):
            return ZERO
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        if not isinstance(other, Posynomial):
            return NotImplemented
        if other.dim != self.dim:
            raise ValueError("dimension mismatch in posynomial product")
        return Posynomial(
            Monomial(
                s.coeff * t.coeff,
                tuple(a + b for a, b in zip(s.exponents, t.exponents)),
            )
            for s in self.terms
            for t in other.terms
        )

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Posynomial({len(self.terms)} terms, dim={self.dim})"


def add(p: PosyOrZero, q: PosyOrZero) -> PosyOrZero:
    if isinstance(p, Zero):
        return q
    return p + q


def mul(p: PosyOrZero, q: PosyOrZero) -> PosyOrZero:
    if isinstance(p, Zero) or isinstance(q, Zero):
        return ZERO
    return p * q


def scale(p: PosyOrZero, c: float) -> PosyOrZero:
    """c * p for c >= 0. Scaling by exactly zero yields ZERO."""
    if c < 0.0 or not np.isfinite(c):
        raise ValueError("scale factor must be finite and nonnegative")
    if c == 0.0 or isinstance(p, Zero):
        return ZERO
    return Posynomial(Monomial(c * t.coeff, t.exponents) for t in p.terms)
