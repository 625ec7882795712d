"""Positive semi-Markov jump linear systems and their mean decay rate.

The model: a state x(t) >= 0 follows dx/dt = A_m x between jumps of a mode
process m(t) taking values in {0..N-1}. Mode transitions follow a
row-stochastic matrix P; the time spent in mode i before a jump to mode j
is a random sojourn drawn per edge, truncated to a shared horizon. Mode
matrices are Metzler and may depend on a positive design vector theta
through entrywise posynomials, so first moments stay order-preserving in
theta.

Sojourn table convention: sojourn[i][j] is the distribution of the time
spent in mode i on a visit that ends with a jump to j. The clock belongs
to the source mode. Under this convention the expected state at jump
times obeys the exact linear recursion

    z_i(k+1) = sum_j P[j, i] * E[exp((A_j + g I) h_{j -> i})] z_j(k)

once states are weighted by exp(g t), which is what assemble_kernel
builds. The g at which the spectral radius of that block matrix crosses
one is the exponential decay rate of the mean, found here by bisection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .numlin import (
    NumericalError,
    PerronResult,
    gauss_legendre,
    matrix_exp,
    matrix_exp_stack,
    spectral_radius,
)
from .posy import Posynomial, PosyOrZero, Zero, ZERO

__all__ = [
    "SojournDistribution",
    "TruncatedWeibull",
    "TruncatedExponential",
    "UniformSojourn",
    "DiracSojourn",
    "SemiMarkovSpec",
    "ParametrizedSystem",
    "KernelMatrix",
    "DecayRateReport",
    "assemble_kernel",
    "KernelBuilder",
    "is_mean_stable",
    "decay_rate",
    "log_rho",
    "log_rho_grad",
]

_MASS_TOL = 1e-10
_CHECK_REL = 1e-6
# exp(g * tau) beyond this exponent cannot be represented alongside the
# mode exponentials; the radius is treated as +inf during bracketing.
_G_EXPONENT_CAP = 600.0


class SojournDistribution:
    """Base for sojourn laws supported on (0, horizon].

    Subclasses provide density/cdf/quantile and a quadrature rule that
    absorbs the density into the weights, so integrals of matrix-valued
    functions against the law reduce to weighted sums. Construction
    verifies the absorbed rule integrates to one within 1e-10.
    """

    horizon: float

    def __init__(self, horizon: float):
        horizon = float(horizon)
        if not (np.isfinite(horizon) and horizon > 0.0):
            raise ValueError("horizon must be positive and finite")
        self.horizon = horizon

    @property
    def is_dirac(self) -> bool:
        return False

    def density(self, tau):
        raise NotImplementedError

    def cdf(self, tau):
        raise NotImplementedError

    def quantile(self, u):
        """Inverse of the truncated cdf, mapping (0, 1] onto (0, horizon]."""
        raise NotImplementedError

    def rule(self, nodes: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Quadrature points in (0, horizon] and density-absorbed weights."""
        raise NotImplementedError

    def mean(self) -> float:
        tau, w = self.rule(512)
        return float(np.dot(w, tau))

    def _check_mass(self):
        # densities with weakly singular derivatives converge only
        # algebraically under Gauss-Legendre, so escalate before rejecting
        for nodes in (256, 512, 1024):
            tau, w = self.rule(nodes)
            mass = float(np.sum(w))
            if abs(mass - 1.0) <= _MASS_TOL:
                return
        raise ValueError(
            f"{type(self).__name__} density integrates to {mass!r} on "
            f"(0, {self.horizon}] even at {nodes} quadrature nodes, "
            f"expected 1 within {_MASS_TOL}"
        )


class TruncatedWeibull(SojournDistribution):
    """Weibull(scale, shape) conditioned on landing in (0, horizon].

    The normalizer is 1/F(horizon) where F is the untruncated cdf. The
    density behaves like tau**(shape - 1) at 0+, which is singular below
    shape 1 and has unbounded higher derivatives at any fractional shape.
    The quadrature rule therefore substitutes tau = scale * z**m with the
    smallest integer m giving m * shape >= 4: the transformed density is
    z**(m * shape - 1) * exp(-z**(m * shape)) up to constants, smooth
    enough for Gauss-Legendre at every shape, while integrands evaluated
    at the returned points stay smooth in z because m is an integer.
    """

    def __init__(self, scale: float, shape: float, horizon: float):
        super().__init__(horizon)
        scale = float(scale)
        shape = float(shape)
        if not (np.isfinite(scale) and scale > 0.0):
            raise ValueError("scale must be positive")
        if not (np.isfinite(shape) and shape > 0.0):
            raise ValueError("shape must be positive")
        self.scale = scale
        self.shape = shape
        tail = (horizon / scale) ** shape
        self.total_mass = -np.expm1(-tail)  # F(horizon), in (0, 1]
        if self.total_mass <= 0.0:
            raise ValueError("no probability mass below the horizon")
        self.normalizer = 1.0 / self.total_mass
        self._check_mass()

    def density(self, tau):
        tau = np.asarray(tau, dtype=float)
        z = np.zeros_like(tau)
        inside = (tau > 0.0) & (tau <= self.horizon)
        t = tau[inside] / self.scale
        z[inside] = (
            self.normalizer * (self.shape / self.scale) * t ** (self.shape - 1.0) * np.exp(-(t ** self.shape))
        )
        return z if z.ndim else float(z)

    def cdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        clipped = np.clip(tau, 0.0, self.horizon)
        out = -np.expm1(-((clipped / self.scale) ** self.shape)) * self.normalizer
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u > 1.0)):
            raise ValueError("quantile argument must lie in (0, 1]")
        out = self.scale * (-np.log1p(-u * self.total_mass)) ** (1.0 / self.shape)
        out = np.minimum(out, self.horizon)
        return out if out.ndim else float(out)

    def rule(self, nodes: int):
        m = max(1, int(np.ceil(4.0 / self.shape)))
        z_hi = (self.horizon / self.scale) ** (1.0 / m)
        z, w = gauss_legendre(z_hi, nodes)
        mk = m * self.shape
        tau = self.scale * z ** m
        weights = w * self.normalizer * mk * z ** (mk - 1.0) * np.exp(-(z ** mk))
        return tau, weights


class TruncatedExponential(SojournDistribution):
    """Exponential(rate) conditioned on landing in (0, horizon]."""

    def __init__(self, rate: float, horizon: float):
        super().__init__(horizon)
        rate = float(rate)
        if not (np.isfinite(rate) and rate > 0.0):
            raise ValueError("rate must be positive")
        self.rate = rate
        self.total_mass = -np.expm1(-rate * horizon)
        self.normalizer = 1.0 / self.total_mass
        self._check_mass()

    def density(self, tau):
        tau = np.asarray(tau, dtype=float)
        z = np.zeros_like(tau)
        inside = (tau > 0.0) & (tau <= self.horizon)
        z[inside] = self.normalizer * self.rate * np.exp(-self.rate * tau[inside])
        return z if z.ndim else float(z)

    def cdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        clipped = np.clip(tau, 0.0, self.horizon)
        out = -np.expm1(-self.rate * clipped) * self.normalizer
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u > 1.0)):
            raise ValueError("quantile argument must lie in (0, 1]")
        out = -np.log1p(-u * self.total_mass) / self.rate
        out = np.minimum(out, self.horizon)
        return out if out.ndim else float(out)

    def rule(self, nodes: int):
        tau, w = gauss_legendre(self.horizon, nodes)
        return tau, w * self.density(tau)


class UniformSojourn(SojournDistribution):
    """Uniform law on (0, horizon]."""

    def __init__(self, horizon: float):
        super().__init__(horizon)
        self.normalizer = 1.0
        self._check_mass()

    def density(self, tau):
        tau = np.asarray(tau, dtype=float)
        z = np.zeros_like(tau)
        z[(tau > 0.0) & (tau <= self.horizon)] = 1.0 / self.horizon
        return z if z.ndim else float(z)

    def cdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.clip(tau, 0.0, self.horizon) / self.horizon
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u > 1.0)):
            raise ValueError("quantile argument must lie in (0, 1]")
        out = u * self.horizon
        return out if out.ndim else float(out)

    def rule(self, nodes: int):
        tau, w = gauss_legendre(self.horizon, nodes)
        return tau, w / self.horizon


class DiracSojourn(SojournDistribution):
    """Deterministic sojourn at a single point of (0, horizon].

    Has no density; kernel assembly and sampling treat it exactly, so no
    quadrature rule exists either.
    """

    def __init__(self, point: float, horizon: float):
        super().__init__(horizon)
        point = float(point)
        if not (0.0 < point <= self.horizon):
            raise ValueError("dirac point must lie in (0, horizon]")
        self.point = point
        self.normalizer = 1.0

    @property
    def is_dirac(self) -> bool:
        return True

    def density(self, tau):
        raise ValueError("a Dirac sojourn has no density")

    def cdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = (tau >= self.point).astype(float)
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u > 1.0)):
            raise ValueError("quantile argument must lie in (0, 1]")
        out = np.full_like(u, self.point)
        return out if out.ndim else float(out)

    def rule(self, nodes: int):
        raise ValueError("a Dirac sojourn has no quadrature rule")

    def mean(self) -> float:
        return self.point


class SemiMarkovSpec:
    """Embedded mode chain plus the per-edge sojourn table.

    P must be row-stochastic with nonnegative entries. sojourn[i][j] is
    required wherever P[i, j] > 0 and may be None elsewhere; all present
    entries must share one horizon. Self-transitions (P[i, i] > 0) are
    legal but usually indicate a modelling slip, so they warn.
    """

    def __init__(self, P, sojourn: Sequence[Sequence[SojournDistribution | None]]):
        P = np.array(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if np.any(P < 0.0) or not np.all(np.isfinite(P)):
            raise ValueError("P must be entrywise nonnegative and finite")
        rows = P.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-12):
            raise ValueError(f"P rows must sum to 1 within 1e-12, got sums {rows}")
        N = P.shape[0]
        # a one-state chain can only loop onto itself; that is structure,
        # not a modelling slip, so only multi-state diagonals warn
        if N > 1 and np.any(np.diag(P) > 0.0):
            warnings.warn(
                "self-transitions present: a sojourn then ends in the same "
                "mode, which is rarely intended",
                stacklevel=2,
            )
        table = [list(row) for row in sojourn]
        if len(table) != N or any(len(row) != N for row in table):
            raise ValueError(f"sojourn table must be {N}x{N}")
        horizon = None
        for i in range(N):
            for j in range(N):
                dist = table[i][j]
                if P[i, j] > 0.0:
                    if dist is None:
                        raise ValueError(f"edge ({i}, {j}) has P > 0 but no sojourn law")
                    if horizon is None:
                        horizon = dist.horizon
                    elif dist.horizon != horizon:
                        raise ValueError("all sojourn laws must share one horizon")
        if horizon is None:
            raise ValueError("chain has no edges")
        self.P = P
        self.P.setflags(write=False)
        self.sojourn = table
        self.N = N
        self.horizon = float(horizon)

    @classmethod
    def per_mode(cls, P, dists: Sequence[SojournDistribution]) -> "SemiMarkovSpec":
        """Build a table where each mode has one sojourn law for all exits."""
        P = np.asarray(P, dtype=float)
        N = P.shape[0]
        if len(dists) != N:
            raise ValueError(f"need {N} distributions, got {len(dists)}")
        return cls(P, [[dists[i]] * N for i in range(N)])


class ParametrizedSystem:
    """Mode matrices A_k(theta) = M_k + posynomial part, over a mode chain.

    M_k is the constant Metzler part; varying[k][i][j] is a Posynomial (or
    ZERO) in theta adding a nonnegative amount, so every A_k(theta) stays
    Metzler for positive theta. cost and the posynomial constraint list
    are optional; they are only consulted by the design solvers.
    """

    def __init__(
        self,
        metzler: Sequence,
        varying: Sequence[Sequence[Sequence[PosyOrZero]]],
        chain: SemiMarkovSpec,
        param_dim: int,
        cost: Posynomial | None = None,
        constraints: Sequence[tuple[Posynomial, float]] = (),
    ):
        metzler = [np.array(M, dtype=float) for M in metzler]
        N = len(metzler)
        if N != chain.N:
            raise ValueError(f"{N} mode matrices for a {chain.N}-mode chain")
        n = metzler[0].shape[0]
        for k, M in enumerate(metzler):
            if M.shape != (n, n):
                raise ValueError("mode matrices must share one square shape")
            if not np.all(np.isfinite(M)):
                raise ValueError(f"mode {k} has non-finite entries")
            off = M - np.diag(np.diag(M))
            if np.any(off < 0.0):
                raise ValueError(f"mode {k} constant part is not Metzler")
            M.setflags(write=False)
        if len(varying) != N:
            raise ValueError("varying part must list one grid per mode")
        for k, grid in enumerate(varying):
            if len(grid) != n or any(len(row) != n for row in grid):
                raise ValueError(f"varying grid for mode {k} must be {n}x{n}")
            for row in grid:
                for entry in row:
                    if isinstance(entry, Zero):
                        continue
                    if not isinstance(entry, Posynomial):
                        raise ValueError("varying entries must be Posynomial or ZERO")
                    if entry.dim != param_dim:
                        raise ValueError(
                            f"posynomial dimension {entry.dim} != param_dim {param_dim}"
                        )
        if cost is not None and cost.dim != param_dim:
            raise ValueError("cost dimension mismatch")
        for g, bound in constraints:
            if g.dim != param_dim:
                raise ValueError("constraint dimension mismatch")
            if not (np.isfinite(bound) and bound > 0.0):
                raise ValueError("constraint bounds must be positive")
        self.metzler = metzler
        self.varying = [[list(row) for row in grid] for grid in varying]
        self.chain = chain
        self.param_dim = int(param_dim)
        self.cost = cost
        self.constraints = tuple((g, float(b)) for g, b in constraints)
        self.n = n
        self.N = N

    @classmethod
    def constant(cls, matrices: Sequence, chain: SemiMarkovSpec) -> "ParametrizedSystem":
        """A system with no design parameters at all."""
        mats = [np.asarray(M, dtype=float) for M in matrices]
        n = mats[0].shape[0]
        zero_grid = [[[ZERO] * n for _ in range(n)] for _ in mats]
        return cls(mats, zero_grid, chain, param_dim=0)

    def _check_theta(self, theta) -> NDArray[np.float64]:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.param_dim:
            raise ValueError(f"theta has length {theta.size}, expected {self.param_dim}")
        if np.any(theta <= 0.0) or not np.all(np.isfinite(theta)):
            raise ValueError("theta must be entrywise positive and finite")
        return theta

    def mode_matrix(self, k: int, theta) -> NDArray[np.float64]:
        """A_k(theta), guaranteed Metzler."""
        theta = self._check_theta(theta)
        A = self.metzler[k].copy()
        for i in range(self.n):
            for j in range(self.n):
                entry = self.varying[k][i][j]
                if not isinstance(entry, Zero):
                    A[i, j] += entry.eval(theta)
        return A


@dataclass(frozen=True)
class KernelMatrix:
    """Assembled jump-mean propagation matrix with its block grid."""

    matrix: NDArray[np.float64]
    blocks: list  # blocks[i][j], each n x n or None where P[j, i] == 0
    g: float
    nodes: int


@dataclass(frozen=True)
class DecayRateReport:
    gamma: float
    stable: bool
    iterations: int
    bracket: tuple[float, float]
    # True when gamma <= 0: the radius test is continued below g = 0,
    # where it is an analytic extension rather than a certified rate.
    extension: bool


class _Edge:
    __slots__ = ("src", "dst", "prob", "tau", "weights", "tau_fine", "weights_fine", "stack", "stack_fine")

    def __init__(self, src, dst, prob, tau, weights, tau_fine, weights_fine, stack, stack_fine):
        self.src = src
        self.dst = dst
        self.prob = prob
        self.tau = tau
        self.weights = weights
        self.tau_fine = tau_fine
        self.weights_fine = weights_fine
        self.stack = stack
        self.stack_fine = stack_fine


class KernelBuilder:
    """Per-theta cache for assembling kernels at many g values.

    Mode exponentials on the quadrature grids depend only on theta, so a
    bisection over g reuses them; each assemble is then just weighted
    sums. Every assemble is verified against a rule with twice the nodes
    (Dirac edges are exact and skip the check).
    """

    def __init__(self, system: ParametrizedSystem, theta, nodes: int = 64):
        if nodes < 2:
            raise ValueError("need at least two quadrature nodes")
        self.system = system
        self.nodes = int(nodes)
        self.n = system.n
        self.N = system.N
        theta = system._check_theta(theta)
        chain = system.chain
        mode_mats = [system.mode_matrix(k, theta) for k in range(system.N)]
        stacks: dict[tuple[int, int], NDArray[np.float64]] = {}
        self.edges: list[_Edge] = []
        self.has_quadrature = False
        for src in range(system.N):
            A = mode_mats[src]
            for dst in range(system.N):
                p = chain.P[src, dst]
                if p == 0.0:
                    continue
                dist = chain.sojourn[src][dst]
                if dist.is_dirac:
                    point = dist.point
                    E = matrix_exp(A, point)
                    self.edges.append(
                        _Edge(src, dst, p, np.array([point]), np.array([1.0]),
                              np.array([point]), np.array([1.0]), E[None, :, :], E[None, :, :])
                    )
                    continue
                self.has_quadrature = True
                key = (src, id(dist))
                if key not in stacks:
                    tau, w = dist.rule(self.nodes)
                    tau_f, w_f = dist.rule(2 * self.nodes)
                    stacks[key] = (tau, w, matrix_exp_stack(A, tau), tau_f, w_f, matrix_exp_stack(A, tau_f))
                tau, w, stack, tau_f, w_f, stack_f = stacks[key]
                self.edges.append(_Edge(src, dst, p, tau, w, tau_f, w_f, stack, stack_f))

    def _sum(self, edge: _Edge, g: float, fine: bool) -> NDArray[np.float64]:
        tau = edge.tau_fine if fine else edge.tau
        w = edge.weights_fine if fine else edge.weights
        stack = edge.stack_fine if fine else edge.stack
        # huge g probes overflow to inf by design; assemble() reports them
        with np.errstate(over="ignore", invalid="ignore"):
            coeff = edge.prob * w * np.exp(g * tau)
            return np.einsum("q,qab->ab", coeff, stack)

    def assemble(self, g: float, check: bool = True) -> NDArray[np.float64]:
        """Kernel at weight g; raises NumericalError on overflow or when
        the doubled-node rule disagrees beyond 1e-6 relative."""
        g = float(g)
        n, N = self.n, self.N
        K = np.zeros((n * N, n * N))
        worst = 0.0
        for edge in self.edges:
            block = self._sum(edge, g, fine=False)
            if check and self.has_quadrature and edge.tau.size > 1:
                fine = self._sum(edge, g, fine=True)
                scale = max(np.max(np.abs(fine)), np.finfo(float).tiny)
                worst = max(worst, float(np.max(np.abs(block - fine)) / scale))
                block = fine  # the finer rule is the better answer; keep it
            r, c = edge.dst, edge.src
            K[r * n:(r + 1) * n, c * n:(c + 1) * n] += block
        if not np.all(np.isfinite(K)):
            raise NumericalError(f"kernel overflowed at g={g!r}")
        if worst > _CHECK_REL:
            raise NumericalError(
                f"quadrature self-check failed at g={g!r}: doubled nodes move "
                f"the kernel by {worst:.3e} relative (limit {_CHECK_REL})"
            )
        return K

    def radius(self, g: float, check: bool = True) -> PerronResult:
        return spectral_radius(self.assemble(g, check=check))


def assemble_kernel(
    system: ParametrizedSystem, theta, g: float, nodes: int = 64, check: bool = True
) -> KernelMatrix:
    """One-shot kernel assembly; see KernelBuilder for the math."""
    builder = KernelBuilder(system, theta, nodes=nodes)
    K = builder.assemble(g, check=check)
    n, N = system.n, system.N
    blocks = [
        [
            K[i * n:(i + 1) * n, j * n:(j + 1) * n] if system.chain.P[j, i] > 0.0 else None
            for j in range(N)
        ]
        for i in range(N)
    ]
    return KernelMatrix(matrix=K, blocks=blocks, g=float(g), nodes=nodes)


def is_mean_stable(system: ParametrizedSystem, theta, g: float, nodes: int = 64) -> bool:
    """True when the mean decays strictly faster than exp(-g t); g > 0."""
    if not g > 0.0:
        raise ValueError("the stability margin g must be positive")
    builder = KernelBuilder(system, theta, nodes=nodes)
    return builder.radius(g).radius < 1.0


def _bracket_radius(builder: KernelBuilder, g: float) -> float:
    # During bracketing an unrepresentable kernel means rho is huge.
    if g * builder.system.chain.horizon > _G_EXPONENT_CAP:
        return np.inf
    try:
        return builder.radius(g).radius
    except NumericalError as err:
        if "overflow" in str(err):
            return np.inf
        raise


def decay_rate(
    system: ParametrizedSystem,
    theta=(),
    tol: float = 1e-9,
    nodes: int = 64,
    cap: float = 1e3,
) -> DecayRateReport:
    """Exponential decay rate of the first moment, by bisection on g.

    The kernel radius is strictly increasing in g, so the root of
    rho(g) = 1 is bracketed by doubling and then bisected to the given
    bracket width. Stable systems (rho < 1 at g = 0) return gamma > 0;
    otherwise the same test is continued below zero and the negative
    gamma is flagged as an extension. |g| beyond cap raises.
    """
    builder = KernelBuilder(system, theta, nodes=nodes)
    evaluations = 0

    def rho(g: float) -> float:
        nonlocal evaluations
        evaluations += 1
        return _bracket_radius(builder, g)

    stable = rho(0.0) < 1.0
    if stable:
        lo, hi = 0.0, 1.0
        while rho(hi) < 1.0:
            lo, hi = hi, 2.0 * hi
            if hi > cap:
                raise NumericalError(f"decay rate exceeds the cap {cap}; input looks pathological")
    else:
        lo, hi = -1.0, 0.0
        while rho(lo) >= 1.0:
            lo, hi = 2.0 * lo, lo
            if -lo > cap:
                raise NumericalError(f"growth rate exceeds the cap {cap}; input looks pathological")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rho(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    gamma = 0.5 * (lo + hi)
    return DecayRateReport(
        gamma=gamma,
        stable=stable,
        iterations=evaluations,
        bracket=(lo, hi),
        extension=not stable,
    )


def log_rho(system: ParametrizedSystem, u, v: float, nodes: int = 64, check: bool = True) -> float:
    """log of the kernel radius at theta = exp(u), g = exp(v).

    Jointly convex in (u, v): every kernel entry is a posynomial value in
    (theta, g) by expansion of the exponentials, and the radius of a
    nonnegative matrix is superconvex in superconvex entries.
    """
    u = np.asarray(u, dtype=float).ravel()
    builder = KernelBuilder(system, np.exp(u), nodes=nodes)
    radius = builder.radius(np.exp(float(v)), check=check).radius
    if radius <= 0.0:
        raise NumericalError("kernel radius is zero; log_rho undefined")
    return float(np.log(radius))


def _weighted_kernel_diff(system, u, v, nodes, step, direction):
    # Central difference of the kernel along one log coordinate.
    u = np.asarray(u, dtype=float)
    g = np.exp(v)
    if direction == system.param_dim:
        builder = KernelBuilder(system, np.exp(u), nodes=nodes)
        K_plus = builder.assemble(np.exp(v + step), check=False)
        K_minus = builder.assemble(np.exp(v - step), check=False)
    else:
        e = np.zeros_like(u)
        e[direction] = step
        K_plus = KernelBuilder(system, np.exp(u + e), nodes=nodes).assemble(g, check=False)
        K_minus = KernelBuilder(system, np.exp(u - e), nodes=nodes).assemble(g, check=False)
    return (K_plus - K_minus) / (2.0 * step)


def log_rho_grad(
    system: ParametrizedSystem,
    u,
    v: float,
    nodes: int = 64,
    step: float = 1e-5,
) -> tuple[NDArray[np.float64], float]:
    """Gradient of log_rho in (u, v).

    Uses the eigenvalue perturbation identity d rho = l' (dK) r / (l' r)
    with the Perron pair of the kernel, and central differences of the
    kernel entries along each log coordinate. Falls back to differencing
    log_rho itself when the Perron pair is unreliable.
    """
    u = np.asarray(u, dtype=float).ravel()
    v = float(v)
    builder = KernelBuilder(system, np.exp(u), nodes=nodes)
    perron = builder.radius(np.exp(v), check=False)
    overlap = float(perron.left @ perron.right)
    healthy = (
        perron.converged
        and perron.radius > 0.0
        and overlap > 1e-12 * np.linalg.norm(perron.left) * np.linalg.norm(perron.right)
    )
    dim = system.param_dim
    if healthy:
        weight = np.outer(perron.left, perron.right) / overlap
        grad = np.empty(dim + 1)
        for d in range(dim + 1):
            dK = _weighted_kernel_diff(system, u, v, nodes, step, d)
            grad[d] = float(np.sum(weight * dK)) / perron.radius
        return grad[:dim], float(grad[dim])

    def f(uu, vv):
        return log_rho(system, uu, vv, nodes=nodes, check=False)

    grad_u = np.empty(dim)
    for d in range(dim):
        e = np.zeros(dim)
        e[d] = step
        grad_u[d] = (f(u + e, v) - f(u - e, v)) / (2.0 * step)
    grad_v = (f(u, v + step) - f(u, v - step)) / (2.0 * step)
    return grad_u, float(grad_v)
