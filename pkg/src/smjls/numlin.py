"""Dense numerical primitives: matrix exponentials, Perron radius, quadrature.

Everything here works on plain numpy arrays and is deterministic. Matrices
are small (a handful of modes times a handful of states), so the routines
favour robustness and reproducibility over large-scale performance.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "NumericalError",
    "PerronResult",
    "matrix_exp",
    "matrix_exp_stack",
    "spectral_radius",
    "gauss_legendre",
    "integrate_matrix",
]

# Taylor order for the scaling-and-squaring core. With the scaled norm held
# at or below 0.5, the order-13 remainder is below 1e-14 relative.
_TAYLOR_ORDER = 13
_NORM_CAP = 0.5

# Entries at or below this fraction of the largest magnitude are rounding
# debris; negative ones are clamped so exponentials of Metzler matrices
# stay entrywise nonnegative.
_CLAMP_REL = 1e-13


class NumericalError(RuntimeError):
    """A numerical routine could not meet its accuracy contract."""


def _square_matrix(A) -> NDArray[np.float64]:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def _clamp_negative_dust(E: NDArray[np.float64]) -> NDArray[np.float64]:
    scale = np.max(np.abs(E))
    if scale > 0.0:
        E[(E < 0.0) & (E > -_CLAMP_REL * scale)] = 0.0
    return E


def _taylor_core(B: NDArray[np.float64]) -> NDArray[np.float64]:
    # Horner evaluation of sum B^k / k!, valid for ||B|| <= _NORM_CAP.
    n = B.shape[-1]
    eye = np.broadcast_to(np.eye(n), B.shape).copy()
    E = eye.copy()
    for k in range(_TAYLOR_ORDER, 0, -1):
        E = eye + (B @ E) / k
    return E


def matrix_exp(A, t: float = 1.0) -> NDArray[np.float64]:
    """Return exp(A*t) by scaling and squaring with a fixed-order core.

    t must be nonnegative. Tiny negative entries of the result (rounding
    noise relative to the largest entry) are clamped to zero.
    """
    A = _square_matrix(A)
    t = float(t)
    if t < 0.0:
        raise ValueError("t must be nonnegative")
    B = A * t
    norm = np.linalg.norm(B, 1)
    squarings = 0
    if norm > _NORM_CAP:
        squarings = int(np.ceil(np.log2(norm / _NORM_CAP)))
        B = B / (2.0 ** squarings)
    E = _taylor_core(B)
    for _ in range(squarings):
        E = E @ E
    return _clamp_negative_dust(E)


def matrix_exp_stack(A, ts) -> NDArray[np.float64]:
    """Return the stack exp(A*ts[q]) with shape (len(ts), n, n).

    Equivalent to calling matrix_exp per time point, but the Taylor core
    and the squarings run batched. Each slice is scaled independently so
    small times do not inherit the squaring count of large ones.
    """
    A = _square_matrix(A)
    ts = np.asarray(ts, dtype=float).ravel()
    if ts.size == 0:
        return np.zeros((0,) + A.shape)
    if np.any(ts < 0.0):
        raise ValueError("time points must be nonnegative")
    B = ts[:, None, None] * A
    norms = np.linalg.norm(B, 1, axis=(1, 2))
    squarings = np.zeros(ts.size, dtype=int)
    mask = norms > _NORM_CAP
    squarings[mask] = np.ceil(np.log2(norms[mask] / _NORM_CAP)).astype(int)
    B /= (2.0 ** squarings)[:, None, None]
    E = _taylor_core(B)
    for step in range(int(squarings.max(initial=0))):
        todo = squarings > step
        E[todo] = E[todo] @ E[todo]
    return _clamp_negative_dust(E)


@dataclass(frozen=True)
class PerronResult:
    """Spectral radius of a nonnegative matrix with its Perron vectors.

    right and left are nonnegative, 1-norm normalized. converged means the
    eigen-residuals passed the requested tolerance (the direct eigenvalue
    fallback counts as converged).
    """

    radius: float
    right: NDArray[np.float64]
    left: NDArray[np.float64]
    iterations: int
    converged: bool


def _perron_fallback(A: NDArray[np.float64], iterations: int) -> PerronResult:
    # Reducible or zero-gap input: take the radius from a dense eigensolve
    # and recover nonnegative eigenvectors for it.
    evals = np.linalg.eigvals(A)
    radius = float(np.max(np.abs(evals)))

    def nonneg_vector(M) -> NDArray[np.float64]:
        w, V = np.linalg.eig(M)
        candidates = np.flatnonzero(np.abs(w) >= radius * (1.0 - 1e-9))
        # Prefer the eigenvalue closest to the real axis; the Perron root
        # of a nonnegative matrix is real.
        idx = min(candidates, key=lambda c: abs(w[c].imag))
        v = V[:, idx]
        pivot = v[np.argmax(np.abs(v))]
        if pivot != 0:
            v = v / pivot
        v = np.abs(v.real)
        s = v.sum()
        return v / s if s > 0 else np.full(M.shape[0], 1.0 / M.shape[0])

    return PerronResult(
        radius=radius,
        right=nonneg_vector(A),
        left=nonneg_vector(A.T),
        iterations=iterations,
        converged=True,
    )


_DENSE_CUTOFF = 64


def spectral_radius(A, tol: float = 1e-12, max_iter: int = 10000) -> PerronResult:
    """Perron radius and left/right vectors of an entrywise nonnegative matrix.

    Small matrices go straight to a dense eigensolve; it is faster than any
    iteration at these sizes and has no gap or periodicity failure modes.
    Larger matrices use power iteration from the all-ones vector on a
    diagonally shifted copy. The shift is sized from an unshifted warmup
    estimate of the radius itself: a shift comparable to rho keeps periodic
    matrices (anti-diagonal block structure is common here) convergent,
    while a norm-sized shift can exceed rho by orders of magnitude and
    stall the iteration. Falls back to the dense eigensolve when the gap
    is too small for the iteration to settle.
    """
    A = _square_matrix(A)
    if np.any(A < 0.0):
        raise ValueError("spectral_radius expects a nonnegative matrix")
    n = A.shape[0]
    scale = np.linalg.norm(A, np.inf)
    if scale == 0.0:
        v = np.full(n, 1.0 / n)
        return PerronResult(0.0, v, v, 0, True)
    if n <= _DENSE_CUTOFF:
        return _perron_fallback(A, 0)

    shift = _shift_estimate(A, scale)
    x = np.full(n, 1.0 / n)
    y = np.full(n, 1.0 / n)
    radius = scale
    for it in range(1, max_iter + 1):
        x_new = A @ x + shift * x
        y_new = A.T @ y + shift * y
        sx = x_new.sum()
        sy = y_new.sum()
        if sx <= 0.0 or sy <= 0.0:
            break
        x = x_new / sx
        y = y_new / sy
        radius = sx - shift
        bound = tol * max(radius, np.finfo(float).tiny)
        if (
            np.linalg.norm(A @ x - radius * x, 1) <= bound
            and np.linalg.norm(A.T @ y - radius * y, 1) <= bound
        ):
            return PerronResult(float(radius), x, y, it, True)
    return _perron_fallback(A, max_iter)


def _shift_estimate(A: NDArray[np.float64], scale: float) -> float:
    # Geometric mean of normalized growth factors over an even number of
    # unshifted steps; even so that period-2 oscillation averages out.
    x = np.full(A.shape[0], 1.0 / A.shape[0])
    factors = []
    for _ in range(8):
        x_new = A @ x
        s = x_new.sum()
        if s <= 0.0 or not np.isfinite(s):
            return 0.5 * scale
        factors.append(s)
        x = x_new / s
    est = float(np.exp(np.mean(np.log(factors))))
    return est if est > 0.0 else 0.5 * scale


@lru_cache(maxsize=32)
def _leggauss(nodes: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    # computing the rule costs ~100ms at 1024 nodes, so cache per count
    x, w = np.polynomial.legendre.leggauss(nodes)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(horizon: float, nodes: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Gauss-Legendre nodes and weights on [0, horizon]."""
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if nodes < 1:
        raise ValueError("need at least one node")
    x, w = _leggauss(int(nodes))
    return 0.5 * horizon * (x + 1.0), 0.5 * horizon * w


def integrate_matrix(
    f: Callable[[float], NDArray[np.float64]],
    horizon: float,
    nodes: int = 64,
) -> NDArray[np.float64]:
    """Integrate a matrix (or scalar) valued function over [0, horizon].

    Fixed Gauss-Legendre rule with the given node count. Raises
    NumericalError if any sample is non-finite.
    """
    x, w = gauss_legendre(horizon, nodes)
    total = None
    for xq, wq in zip(x, w):
        sample = np.asarray(f(float(xq)), dtype=float)
        if not np.all(np.isfinite(sample)):
            raise NumericalError(f"integrand is non-finite at t={xq:.6g}")
        total = wq * sample if total is None else total + wq * sample
    return total
