"""Convex dosing design over log-transformed parameters.

Two programs over z = (u, v) with theta = exp(u) and rate e^v. The
budget program maximizes the certified decay rate subject to a cost cap
and the design box; the performance program minimizes cost subject to a
pinned rate target. Every constraint is convex in z: posynomials become
log-sum-exp terms, and the log of the kernel radius is convex because
the kernel entries are posynomial in (theta, e^v) and spectral radii of
such matrices are superconvex.

The performance program pins v at log(target): the stability constraint
is then log_rho(u, log target) <= 0, which certifies a decay rate of at
least the target whenever it holds. Solved by a log-barrier method with
damped Newton inner iterations on the barrier's rank-one wall surrogate
Hessian; the radius term has no analytic Hessian of its own, but near
the boundary the wall terms dominate and only constraint gradients are
needed to build them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from scipy.optimize import nnls

from .numlin import NumericalError
from .posy import Posynomial
from .system import ParametrizedSystem, decay_rate, log_rho, log_rho_grad

__all__ = [
    "SolverOptions",
    "BudgetProblem",
    "PerformanceProblem",
    "OptimizationResult",
    "PhaseOneResult",
    "CertificateReport",
    "box_bounds",
    "phase_one",
    "solve_budget",
    "solve_performance",
    "certify_budget",
    "certify_performance",
]


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-8
    mu_start: float = 1.0
    mu_min: float = 1e-8
    mu_shrink: float = 0.1
    max_outer: int = 500
    max_inner: int = 5000
    grad_clip: float = 1e3
    nodes: int = 64
    rate_tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.mu_shrink < 1.0:
            raise ValueError("mu_shrink must lie in (0, 1)")
        if self.mu_min <= 0.0 or self.mu_start < self.mu_min:
            raise ValueError("need mu_start >= mu_min > 0")


@dataclass(frozen=True)
class BudgetProblem:
    """Maximize the certified decay rate under cost <= budget.

    A system without a cost posynomial is allowed; the cap is then
    vacuous and only the box constraints shape the feasible set.
    """

    system: ParametrizedSystem
    budget: float

    def __post_init__(self):
        if not self.budget > 0.0:
            raise ValueError("budget must be positive")


@dataclass(frozen=True)
class PerformanceProblem:
    """Minimize cost subject to a decay rate of at least target_rate."""

    system: ParametrizedSystem
    target_rate: float

    def __post_init__(self):
        if self.system.cost is None:
            raise ValueError("performance problem needs a system with a cost posynomial")
        if not self.target_rate > 0.0:
            raise ValueError("target_rate must be positive")


@dataclass(frozen=True)
class OptimizationResult:
    u_star: NDArray[np.float64]
    v_star: float
    theta_star: NDArray[np.float64]
    achieved_rate: float
    achieved_cost: float
    iterations: int
    kkt_residual: float
    constraint_activity: tuple[tuple[str, float], ...]
    status: str  # optimal | infeasible | max_iter


@dataclass(frozen=True)
class PhaseOneResult:
    feasible: bool
    u: NDArray[np.float64]
    v: float
    max_violation: float
    iterations: int


@dataclass(frozen=True)
class CertificateReport:
    """Outcome of the random feasible-sampling optimality check."""

    kind: str  # budget | performance
    samples: int
    feasible_count: int
    best_value: float
    reference: float
    tolerance: float
    passed: bool


class _Constraint:
    """h(z) <= 0 with a norm-clipped gradient."""

    __slots__ = ("name", "_value", "_grad", "clip")

    def __init__(self, name: str, value: Callable, grad: Callable, clip: float):
        self.name = name
        self._value = value
        self._grad = grad
        self.clip = clip

    def value(self, z: NDArray[np.float64]) -> float:
        return self._value(z)

    def grad(self, z: NDArray[np.float64]) -> NDArray[np.float64]:
        g = self._grad(z)
        norm = float(np.linalg.norm(g))
        if norm > self.clip:
            g = g * (self.clip / norm)
        return g


def box_bounds(
    system: ParametrizedSystem,
    extra_constraints: Sequence[tuple[Posynomial, float]] = (),
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-coordinate (lower, upper) theta bounds implied by monomial constraints.

    Only single-term constraints touching a single coordinate contribute;
    entries stay NaN where no such bound exists.
    """
    dim = system.param_dim
    lo = np.full(dim, np.nan)
    hi = np.full(dim, np.nan)
    for posy, bound in tuple(system.constraints) + tuple(extra_constraints):
        if len(posy.terms) != 1:
            continue
        mono = posy.terms[0]
        expo = np.asarray(mono.exponents, dtype=float)
        live = np.flatnonzero(expo != 0.0)
        if live.size != 1:
            continue
        d = int(live[0])
        a = expo[d]
        # coeff * theta_d**a <= bound
        level = (bound / mono.coeff) ** (1.0 / a)
        if a > 0.0:
            hi[d] = level if np.isnan(hi[d]) else min(hi[d], level)
        else:
            lo[d] = level if np.isnan(lo[d]) else max(lo[d], level)
    return lo, hi


def _log_box_center(lo: NDArray[np.float64], hi: NDArray[np.float64]) -> NDArray[np.float64]:
    center = np.zeros(lo.size)
    for d in range(lo.size):
        has_lo = not np.isnan(lo[d])
        has_hi = not np.isnan(hi[d])
        if has_lo and has_hi:
            center[d] = 0.5 * (np.log(lo[d]) + np.log(hi[d]))
        elif has_hi:
            center[d] = np.log(hi[d]) - 0.7
        elif has_lo:
            center[d] = np.log(lo[d]) + 0.7
    return center


def _posy_constraints(
    system: ParametrizedSystem,
    extra: Sequence[tuple[Posynomial, float]],
    dim: int,
    extent: int,
    clip: float,
) -> list[_Constraint]:
    cons = []
    items = [(f"box[{i}]", p, b) for i, (p, b) in enumerate(system.constraints)]
    items += [(f"extra[{i}]", p, b) for i, (p, b) in enumerate(extra)]
    for name, posy, bound in items:
        if bound <= 0.0:
            raise ValueError(f"{name}: posynomial bound must be positive")

        def value(z, posy=posy, bound=bound):
            return posy.log_eval(z[:dim]) - np.log(bound)

        def grad(z, posy=posy):
            g = np.zeros(extent)
            g[:dim] = posy.log_eval_grad(z[:dim])
            return g

        cons.append(_Constraint(name, value, grad, clip))
    return cons


def _rho_constraint(
    system: ParametrizedSystem,
    dim: int,
    extent: int,
    pinned_v: float | None,
    opts: SolverOptions,
) -> _Constraint:
    def value(z):
        v = pinned_v if pinned_v is not None else z[dim]
        return log_rho(system, z[:dim], v, nodes=opts.nodes, check=False)

    def grad(z):
        v = pinned_v if pinned_v is not None else z[dim]
        gu, gv = log_rho_grad(system, z[:dim], v, nodes=opts.nodes)
        g = np.zeros(extent)
        g[:dim] = gu
        if pinned_v is None:
            g[dim] = gv
        return g

    return _Constraint("stability", value, grad, opts.grad_clip)


def _max_violation(cons, z) -> tuple[float, int]:
    worst = -np.inf
    idx = 0
    for k, c in enumerate(cons):
        try:
            h = c.value(z)
        except NumericalError:
            h = np.inf
        if h > worst:
            worst, idx = h, k
    return worst, idx


def _slack_phase(cons, z0, opts: SolverOptions, v_index: int | None):
    """Minimize the worst violation through a slack variable.

    Each h_k(z) <= 0 becomes h_k(z) - s <= 0, strictly feasible at any
    finite start once s exceeds the worst violation, so the barrier
    solver applies directly with objective s. The sign of the optimal s
    settles feasibility; the solve stops early as soon as an iterate is
    strictly inside the original set.
    """
    z0 = z0.copy()
    worst, _ = _max_violation(cons, z0)
    shrink = 0
    while np.isinf(worst) and v_index is not None and shrink < 60:
        # the stability term overflowed; only shrinking the rate helps
        z0[v_index] -= 0.7
        worst, _ = _max_violation(cons, z0)
        shrink += 1
    if np.isinf(worst):
        return False, z0, np.inf, shrink
    if worst < -1e-8:
        return True, z0, float(worst), shrink

    m = z0.size
    slack_cons = [
        _Constraint(
            c.name,
            lambda w, c=c: c.value(w[:m]) - w[m],
            lambda w, c=c: np.append(c.grad(w[:m]), -1.0),
            np.inf,
        )
        for c in cons
    ]

    e_s = np.zeros(m + 1)
    e_s[m] = 1.0

    def obj_value(w):
        return w[m]

    def obj_grad(w):
        return e_s

    # feasibility only needs the sign of s, not a tight optimum
    popts = replace(opts, kkt_tol=max(opts.kkt_tol, 1e-5), mu_min=max(opts.mu_min, 1e-7))
    w0 = np.append(z0, worst + 1.0)
    w, _, iters, _ = _barrier_solve(
        obj_value, obj_grad, slack_cons, w0, popts, stop=lambda w: w[m] < -1e-6
    )
    val, _ = _max_violation(cons, w[:m])
    return bool(val < -1e-8), w[:m], float(val), iters + shrink


def phase_one(
    system: ParametrizedSystem,
    extra_constraints: Sequence[tuple[Posynomial, float]] = (),
    target_rate: float | None = None,
    opts: SolverOptions | None = None,
) -> PhaseOneResult:
    """Search for a strictly feasible (u, v) start, box-center seeded.

    With target_rate given, v is pinned at log(target_rate) and only u is
    searched, matching the performance program's geometry.
    """
    opts = opts or SolverOptions()
    dim = system.param_dim
    lo, hi = box_bounds(system, extra_constraints)
    u0 = _log_box_center(lo, hi)

    pinned = None if target_rate is None else float(np.log(target_rate))
    extent = dim + 1 if pinned is None else dim
    cons = _posy_constraints(system, extra_constraints, dim, extent, opts.grad_clip)
    cons.append(_rho_constraint(system, dim, extent, pinned, opts))

    if pinned is None:
        report = decay_rate(system, np.exp(u0), tol=1e-6, nodes=opts.nodes)
        v0 = np.log(report.gamma) - 0.1 if report.gamma > 0.0 else -6.0
        z0 = np.append(u0, v0)
        v_index = dim
    else:
        z0 = u0
        v_index = None

    ok, z, violation, iters = _slack_phase(cons, z0, opts, v_index)
    u = z[:dim]
    v = float(z[dim]) if pinned is None else pinned
    return PhaseOneResult(ok, u, v, violation, iters)


def _barrier_value(obj_value, cons, z, mu) -> float:
    total = obj_value(z)
    for c in cons:
        try:
            h = c.value(z)
        except NumericalError:
            return np.inf
        if h >= 0.0:
            return np.inf
        total -= mu * np.log(-h)
    return total


def _kkt_certificate(obj_grad, cons, z, mu) -> float:
    """Stationarity plus complementarity at z, by the cheapest valid bound.

    The barrier multipliers mu / (-h) divide by slacks whose computation
    cancels near the boundary, so their rounding error blows up exactly
    where the certificate matters. Multipliers fit by nonnegative least
    squares to the raw gradients avoid that division entirely; any
    lambda >= 0 gives a valid bound, so the best of three is returned:
    the fit over all constraints, the fit over tight ones, and the
    classical barrier formula.
    """
    try:
        gf = obj_grad(z).astype(float)
        grads = np.array([c.grad(z) for c in cons])
        slacks = np.array([-c.value(z) for c in cons])
    except NumericalError:
        return np.inf
    if np.any(slacks <= 0.0) or not np.all(np.isfinite(grads)):
        return np.inf
    best = float(np.linalg.norm(gf + grads.T @ (mu / slacks))) + mu * len(cons)
    for active in (slacks < np.inf, slacks <= 1e-4):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            cand = float(np.linalg.norm(gf))
        else:
            lam, stat = nnls(grads[idx].T, -gf)
            cand = float(stat) + float(lam @ slacks[idx])
        best = min(best, cand)
    return best


def _barrier_solve(obj_value, obj_grad, cons, z0, opts: SolverOptions, stop=None):
    """Log-barrier outer loop with damped Newton inner iterations.

    The exact barrier Hessian would need constraint curvature the radius
    term cannot provide analytically, but near the boundary the Hessian
    is dominated by rank-one wall terms built from constraint gradients
    alone, sum_k (mu / h_k^2) grad h_k grad h_k^T. The neglected
    curvature (objective plus weighted constraint curvature, orthogonal
    to the walls) has unknown magnitude, so it is modeled by an adaptive
    ridge in the Levenberg-Marquardt style: inflate on a rejected step,
    relax after a clean one. Newton steps on that surrogate keep
    tracking the central path into regimes where a double-precision
    barrier value can no longer certify descent; acceptance falls back
    from sufficient decrease to gradient shrinkage once the predicted
    decrease drops below rounding resolution.

    Every stage ends with a KKT certificate; the ladder stops as soon as
    one passes the tolerance, and the best certified iterate is what the
    solve returns, so a late stage drowned in rounding noise can never
    overwrite a good earlier one.

    A stop predicate, when given, is checked after every accepted step
    and aborts the whole solve once satisfied (used by the feasibility
    phase, which only needs any good-enough point). Returns (z,
    kkt_residual, total_inner_iterations, hit_iteration_cap).
    """
    z = z0.copy()
    mu = opts.mu_start
    total_inner = 0
    capped = False
    dim = z.size
    eye = np.eye(dim)
    z_best = z.copy()
    cert_best = np.inf

    def barrier_parts(z, mu):
        """Gradient of the barrier plus per-constraint (h, grad h) pairs."""
        g = obj_grad(z).astype(float).copy()
        walls = []
        for c in cons:
            h = c.value(z)
            gh = c.grad(z)
            g += (mu / (-h)) * gh
            walls.append((h, gh))
        return g, walls

    ridge = 0.1
    outer = 0
    while outer < opts.max_outer:
        outer += 1
        # intermediate stages only track the path; the next stage redoes
        # the polishing, so only the last one runs to the reporting tol
        inner_tol = max(0.3 * opts.kkt_tol, 0.5 * mu)
        g, walls = barrier_parts(z, mu)
        while total_inner < opts.max_inner:
            gnorm = float(np.linalg.norm(g))
            if gnorm <= inner_tol:
                break
            total_inner += 1
            base = _barrier_value(obj_value, cons, z, mu)
            # below this the sufficient-decrease test compares rounding noise
            floor = 64.0 * np.finfo(float).eps * max(1.0, abs(base))
            accepted = False
            g_next = walls_next = None
            for attempt in range(25):
                B = (mu + ridge) * eye
                for h, gh in walls:
                    B = B + (mu / (h * h)) * np.outer(gh, gh)
                try:
                    d = -np.linalg.solve(B, g)
                except np.linalg.LinAlgError:
                    d = -g / (1.0 + ridge)
                dg = float(d @ g)
                if not np.isfinite(dg) or dg >= 0.0:
                    d = -g / (1.0 + ridge)
                    dg = float(d @ g)
                # never close more than half the gap to a linearized wall:
                # the surrogate underestimates the barrier's growth there,
                # and deep cuts land in the blown-up-gradient zone
                t = min(1.0, 1e2 / max(1.0, float(np.linalg.norm(d))))
                for h, gh in walls:
                    ahead = float(gh @ d)
                    if ahead > 0.0:
                        t = min(t, 0.5 * (-h) / ahead)
                cand = z + t * d
                val = _barrier_value(obj_value, cons, cand, mu)
                dec = -1e-4 * t * dg
                g_next = walls_next = None
                if dec > floor:
                    if val <= base - dec:
                        accepted = True
                        if attempt == 0:
                            ridge = max(0.35 * ridge, 1e-8)
                        break
                    # the quadratic model overestimated the decrease, so the
                    # neglected curvature must be larger than the ridge
                    ridge = min(8.0 * ridge, 1e8)
                    continue
                # value test unresolvable in double precision; scan step
                # lengths for a strict gradient shrink instead. A failure
                # here means the stage optimum is resolved to working
                # precision, so the ridge is left alone.
                for _ in range(12):
                    if np.isfinite(val):
                        g_next, walls_next = barrier_parts(cand, mu)
                        if float(np.linalg.norm(g_next)) <= 0.999 * gnorm:
                            accepted = True
                            break
                        g_next = walls_next = None
                    t *= 0.5
                    cand = z + t * d
                    val = _barrier_value(obj_value, cons, cand, mu)
                break
            if not accepted:
                break
            z = cand
            if g_next is None:
                g, walls = barrier_parts(z, mu)
            else:
                g, walls = g_next, walls_next
            if stop is not None and stop(z):
                return z, np.nan, total_inner, False
        else:
            capped = True
        cert = _kkt_certificate(obj_grad, cons, z, mu)
        if cert < cert_best:
            cert_best = cert
            z_best = z.copy()
        if capped or cert_best <= opts.kkt_tol or mu <= 1.0000001 * opts.mu_min:
            break
        mu = max(mu * opts.mu_shrink, opts.mu_min)

    return z_best, float(cert_best), total_inner, capped


def _activity(cons, z) -> tuple[tuple[str, float], ...]:
    return tuple((c.name, float(-c.value(z))) for c in cons)


def _infeasible_result(dim: int, p1: PhaseOneResult) -> OptimizationResult:
    return OptimizationResult(
        u_star=p1.u,
        v_star=p1.v,
        theta_star=np.exp(p1.u),
        achieved_rate=np.nan,
        achieved_cost=np.nan,
        iterations=p1.iterations,
        kkt_residual=np.inf,
        constraint_activity=(),
        status="infeasible",
    )


def solve_budget(problem: BudgetProblem, opts: SolverOptions | None = None) -> OptimizationResult:
    """Maximize v with log_rho(u, v) <= 0, cost and box constraints on u."""
    opts = opts or SolverOptions()
    system = problem.system
    dim = system.param_dim
    extra = [] if system.cost is None else [(system.cost, problem.budget)]
    p1 = phase_one(system, extra, target_rate=None, opts=opts)
    if not p1.feasible:
        return _infeasible_result(dim, p1)

    extent = dim + 1
    cons = _posy_constraints(system, extra, dim, extent, opts.grad_clip)
    cons.append(_rho_constraint(system, dim, extent, None, opts))

    def obj_value(z):
        return -z[dim]

    e_v = np.zeros(extent)
    e_v[dim] = -1.0

    def obj_grad(z):
        return e_v

    z0 = np.append(p1.u, p1.v)
    z, kkt, iters, capped = _barrier_solve(obj_value, obj_grad, cons, z0, opts)
    u = z[:dim]
    theta = np.exp(u)
    rate = decay_rate(system, theta, tol=opts.rate_tol, nodes=opts.nodes).gamma
    status = "optimal" if kkt <= opts.kkt_tol and not capped else "max_iter"
    cost = np.nan if system.cost is None else float(system.cost.eval(theta))
    return OptimizationResult(
        u_star=u,
        v_star=float(z[dim]),
        theta_star=theta,
        achieved_rate=float(rate),
        achieved_cost=cost,
        iterations=iters,
        kkt_residual=float(kkt),
        constraint_activity=_activity(cons, z),
        status=status,
    )


def solve_performance(
    problem: PerformanceProblem, opts: SolverOptions | None = None
) -> OptimizationResult:
    """Minimize log cost with the stability constraint pinned at the target."""
    opts = opts or SolverOptions()
    system = problem.system
    dim = system.param_dim
    p1 = phase_one(system, (), target_rate=problem.target_rate, opts=opts)
    if not p1.feasible:
        return _infeasible_result(dim, p1)

    pinned = float(np.log(problem.target_rate))
    cons = _posy_constraints(system, (), dim, dim, opts.grad_clip)
    cons.append(_rho_constraint(system, dim, dim, pinned, opts))

    cost = system.cost

    def obj_value(z):
        return cost.log_eval(z)

    def obj_grad(z):
        return cost.log_eval_grad(z)

    z, kkt, iters, capped = _barrier_solve(obj_value, obj_grad, cons, p1.u, opts)
    theta = np.exp(z)
    rate = decay_rate(system, theta, tol=opts.rate_tol, nodes=opts.nodes).gamma
    status = "optimal" if kkt <= opts.kkt_tol and not capped else "max_iter"
    return OptimizationResult(
        u_star=z,
        v_star=pinned,
        theta_star=theta,
        achieved_rate=float(rate),
        achieved_cost=float(cost.eval(theta)),
        iterations=iters,
        kkt_residual=float(kkt),
        constraint_activity=_activity(cons, z),
        status=status,
    )


def _sample_box(system, extra, samples, rng):
    lo, hi = box_bounds(system, extra)
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        raise ValueError(
            "sampling certificate needs two-sided monomial box constraints"
        )
    return rng.uniform(lo, hi, (samples, system.param_dim))


def _feasible(system, extra, theta) -> bool:
    for posy, bound in tuple(system.constraints) + tuple(extra):
        if posy.eval(theta) > bound:
            return False
    return True


def certify_budget(
    problem: BudgetProblem,
    result: OptimizationResult,
    samples: int = 1000,
    rng=None,
    tolerance: float = 1e-4,
) -> CertificateReport:
    """No sampled feasible theta may beat the reported rate by > tolerance."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    system = problem.system
    extra = [] if system.cost is None else [(system.cost, problem.budget)]
    draws = _sample_box(system, extra, samples, rng)
    best = -np.inf
    feasible_count = 0
    for theta in draws:
        if not _feasible(system, extra, theta):
            continue
        feasible_count += 1
        best = max(best, decay_rate(system, theta).gamma)
    return CertificateReport(
        kind="budget",
        samples=samples,
        feasible_count=feasible_count,
        best_value=float(best),
        reference=float(result.achieved_rate),
        tolerance=tolerance,
        passed=bool(best <= result.achieved_rate + tolerance),
    )


def certify_performance(
    problem: PerformanceProblem,
    result: OptimizationResult,
    samples: int = 1000,
    rng=None,
    tolerance: float = 1e-4,
) -> CertificateReport:
    """No sampled theta meeting the rate may undercut the cost by > tolerance."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    system = problem.system
    draws = _sample_box(system, (), samples, rng)
    best = np.inf
    feasible_count = 0
    for theta in draws:
        if not _feasible(system, (), theta):
            continue
        if decay_rate(system, theta).gamma < problem.target_rate:
            continue
        feasible_count += 1
        best = min(best, system.cost.eval(theta))
    return CertificateReport(
        kind="performance",
        samples=samples,
        feasible_count=feasible_count,
        best_value=float(best),
        reference=float(result.achieved_cost),
        tolerance=tolerance,
        passed=bool(best >= result.achieved_cost - tolerance),
    )
