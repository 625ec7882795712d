"""Bet-hedging population dynamics under antibiotic dosing.

A community of n phenotypes grows at environment-dependent rates and
switches phenotype stochastically; the environment itself follows a
semi-Markov switching process with truncated-Weibull sojourns. Dosing L
antibiotics suppresses phenotype growth through saturating dose-response
curves, and the design question is where to spend a fixed budget so the
population dies out as fast as possible.

The dose alpha enters through the shifted variable theta = offset +
alpha. Each dose-response term then contributes a single monomial
theta^(-sharpness) to the diagonal of the mode matrices, the constant
part of the diagonal absorbs the zero-dose suppression level, and the
whole problem lands in the convex budget program solved by the
optimizer module.

Phenotype switching is mass-balanced: the rate out of phenotype i
equals the total rate into the others, so switching alone conserves
population and only growth and dosing move the decay rate.

Sweeps iterate independent solves over parameter grids (sojourn-law
shape against the scale of the opposite edge, or dose-response
sharpness against budget); each grid point is deterministic, failures
are recorded per point, and results carry enough metadata to be
plotted or compared externally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .numlin import NumericalError
from .optimizer import BudgetProblem, OptimizationResult, SolverOptions, solve_budget
from .posy import ZERO, Monomial, Posynomial
from .system import ParametrizedSystem, SemiMarkovSpec, TruncatedWeibull

__all__ = [
    "Antibiotic",
    "BetHedgingParams",
    "SweepPoint",
    "SweepResult",
    "suppression",
    "build_system",
    "transformed_budget",
    "dosing_problem",
    "optimize_dosing",
    "weibull_scale_for_mean",
    "weibull_shape_for_mean",
    "truncation_mass",
    "sweep_sojourn_shape",
    "sweep_dose_response",
    "write_sweep_csv",
]


@dataclass(frozen=True)
class Antibiotic:
    """One dosing channel: cost, dose range, and its dose-response curve.

    potency[i] is the full-dose growth reduction of phenotype i; sharpness
    controls how front-loaded the response is (large values saturate
    almost immediately, small values are nearly dose-proportional).
    """

    max_dose: float
    offset: float
    sharpness: float
    potency: tuple[float, ...]
    unit_cost: float = 1.0

    def __post_init__(self):
        for name in ("max_dose", "offset", "sharpness", "unit_cost"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0.0):
                raise ValueError(f"{name} must be finite and positive, got {val!r}")
        object.__setattr__(self, "potency", tuple(float(s) for s in self.potency))
        if len(self.potency) == 0:
            raise ValueError("potency must list one entry per phenotype")
        if any(not (np.isfinite(s) and s >= 0.0) for s in self.potency):
            raise ValueError(f"potency entries must be finite and >= 0, got {self.potency!r}")


def suppression(a: Antibiotic, dose: float) -> NDArray[np.float64]:
    """Growth reduction per phenotype at the given dose.

    Zero dose leaves growth untouched; the maximum dose delivers the full
    potency. In between the curve rises with diminishing returns, steeper
    for larger sharpness.
    """
    if not (np.isfinite(dose) and dose >= 0.0):
        raise ValueError(f"dose must be finite and >= 0, got {dose!r}")
    lo, q = a.offset, a.sharpness
    span = lo ** -q - (lo + a.max_dose) ** -q
    frac = (lo ** -q - (lo + dose) ** -q) / span
    return np.array(a.potency) * frac


class BetHedgingParams:
    """Biological inputs for the dosing design problem.

    growth[k][i] is the growth rate of phenotype i in environment k.
    switching[k][j][i] is the rate at which phenotype j switches to i in
    environment k; diagonals must be zero (outflow is implied by mass
    balance). The environment chain jumps uniformly among the other
    states, and the sojourn on the edge from environment i to j is
    truncated-Weibull with sojourn_scale[i][j], sojourn_shape[i][j], all
    sharing one truncation horizon.
    """

    def __init__(
        self,
        growth,
        switching,
        antibiotics,
        budget: float,
        sojourn_scale,
        sojourn_shape,
        horizon: float,
    ):
        growth = np.array(growth, dtype=float)
        switching = np.array(switching, dtype=float)
        if growth.ndim != 2:
            raise ValueError("growth must be an (environments x phenotypes) table")
        N, n = growth.shape
        if N < 2:
            raise ValueError("at least two environments are needed for a switching chain")
        if switching.shape != (N, n, n):
            raise ValueError(
                f"switching must have shape {(N, n, n)}, got {switching.shape}"
            )
        if not np.all(np.isfinite(growth)) or not np.all(np.isfinite(switching)):
            raise ValueError("growth and switching must be finite")
        off = switching.copy()
        for k in range(N):
            np.fill_diagonal(off[k], 0.0)
        if np.any(off < 0.0):
            raise ValueError("switching rates must be >= 0")
        if not np.array_equal(off, switching):
            raise ValueError("switching diagonals must be zero; outflow is implied")
        antibiotics = tuple(antibiotics)
        if not antibiotics:
            raise ValueError("at least one antibiotic is required")
        for idx, a in enumerate(antibiotics):
            if len(a.potency) != n:
                raise ValueError(
                    f"antibiotic {idx}: potency lists {len(a.potency)} phenotypes, expected {n}"
                )
        if not (np.isfinite(budget) and budget > 0.0):
            raise ValueError(f"budget must be finite and positive, got {budget!r}")
        if not (np.isfinite(horizon) and horizon > 0.0):
            raise ValueError(f"horizon must be finite and positive, got {horizon!r}")
        scale = np.broadcast_to(np.asarray(sojourn_scale, dtype=float), (N, N)).copy()
        shape = np.broadcast_to(np.asarray(sojourn_shape, dtype=float), (N, N)).copy()
        mask = ~np.eye(N, dtype=bool)
        if np.any(scale[mask] <= 0.0) or np.any(shape[mask] <= 0.0):
            raise ValueError("sojourn scale and shape must be positive on every edge")
        self.growth = growth
        self.switching = switching
        self.antibiotics = antibiotics
        self.budget = float(budget)
        self.sojourn_scale = scale
        self.sojourn_shape = shape
        self.horizon = float(horizon)
        self.N = N
        self.n = n
        self.L = len(antibiotics)
        for arr in (self.growth, self.switching, self.sojourn_scale, self.sojourn_shape):
            arr.setflags(write=False)

    def with_sojourn(self, scale, shape) -> "BetHedgingParams":
        return BetHedgingParams(
            self.growth,
            self.switching,
            self.antibiotics,
            self.budget,
            scale,
            shape,
            self.horizon,
        )

    def with_budget(self, budget: float) -> "BetHedgingParams":
        return BetHedgingParams(
            self.growth,
            self.switching,
            self.antibiotics,
            budget,
            self.sojourn_scale,
            self.sojourn_shape,
            self.horizon,
        )

    def with_sharpness(self, sharpness: float) -> "BetHedgingParams":
        meds = tuple(replace(a, sharpness=float(sharpness)) for a in self.antibiotics)
        return BetHedgingParams(
            self.growth,
            self.switching,
            meds,
            self.budget,
            self.sojourn_scale,
            self.sojourn_shape,
            self.horizon,
        )

    @classmethod
    def reference(
        cls,
        budget: float = 2.0,
        sharpness: float = 0.01,
        sojourn_mean: float = 6.0,
        sojourn_shape: float = 5.0,
        horizon: float | None = None,
    ) -> "BetHedgingParams":
        """Two phenotypes in two alternating environments, two antibiotics.

        Each environment favors one phenotype (+/-1 against -/+0.5),
        switching is symmetric per environment (0.1 slow, 0.5 fast), and
        both antibiotics suppress both phenotypes fully at dose 1 for
        unit cost. Sojourn scales are solved so every edge has the
        requested mean under truncation.
        """
        if horizon is None:
            horizon = 5.0 * sojourn_mean
        scale = weibull_scale_for_mean(sojourn_mean, sojourn_shape, horizon)
        growth = [[1.0, -0.5], [-1.0, 0.5]]
        switching = [
            [[0.0, 0.1], [0.1, 0.0]],
            [[0.0, 0.5], [0.5, 0.0]],
        ]
        med = Antibiotic(
            max_dose=1.0, offset=10.0, sharpness=sharpness, potency=(1.0, 1.0)
        )
        return cls(growth, switching, (med, med), budget, scale, sojourn_shape, horizon)


def _dose_span(a: Antibiotic, index: int) -> float:
    # theta^-q spread across the dose range; the monomial coefficient is
    # potency / span, so an underflowed span poisons the whole posynomial
    lo = a.offset
    hi = a.offset + a.max_dose
    span = lo ** -a.sharpness - hi ** -a.sharpness
    if not (span > 0.0 and np.isfinite(1.0 / span)):
        raise ValueError(
            f"antibiotic {index}: sharpness {a.sharpness} collapses "
            f"theta^(-q) across doses [{lo}, {hi}]; the normalized "
            "dose-response coefficient overflows"
        )
    return span


def build_system(p: BetHedgingParams) -> ParametrizedSystem:
    """Assemble the dosing design problem as a ParametrizedSystem.

    Design variable theta_l = offset_l + dose_l, boxed by posynomial
    pairs theta_l/hi_l <= 1 and lo_l/theta_l <= 1. The cost posynomial
    is sum r_l theta_l; pair it with transformed_budget(p), which shifts
    the dose budget by the cost of the offsets.
    """
    N, n, L = p.N, p.n, p.L
    spans = [_dose_span(a, idx) for idx, a in enumerate(p.antibiotics)]

    # dosing enters every environment identically, so one diagonal of
    # posynomials is shared across modes
    diag_posy = []
    zero_dose_level = np.zeros(n)
    for i in range(n):
        terms = []
        for l, a in enumerate(p.antibiotics):
            s = a.potency[i]
            if s == 0.0:
                continue
            exps = [0.0] * L
            exps[l] = -a.sharpness
            terms.append(Monomial(s / spans[l], tuple(exps)))
            zero_dose_level[i] += s * a.offset ** -a.sharpness / spans[l]
        diag_posy.append(Posynomial(terms) if terms else ZERO)

    mats = []
    varying = []
    for k in range(N):
        outflow = p.switching[k].sum(axis=1)
        M = p.switching[k].T.copy()
        np.fill_diagonal(M, p.growth[k] - outflow - zero_dose_level)
        mats.append(M)
        grid = [[ZERO] * n for _ in range(n)]
        for i in range(n):
            grid[i][i] = diag_posy[i]
        varying.append(grid)

    P = np.full((N, N), 1.0 / (N - 1))
    np.fill_diagonal(P, 0.0)
    table = [
        [
            TruncatedWeibull(p.sojourn_scale[i][j], p.sojourn_shape[i][j], p.horizon)
            if i != j
            else None
            for j in range(N)
        ]
        for i in range(N)
    ]
    chain = SemiMarkovSpec(P, table)

    cost_terms = []
    box = []
    for l, a in enumerate(p.antibiotics):
        exps = [0.0] * L
        exps[l] = 1.0
        cost_terms.append(Monomial(a.unit_cost, tuple(exps)))
        hi = a.offset + a.max_dose
        box.append((Posynomial.monomial(1.0 / hi, tuple(exps)), 1.0))
        neg = [0.0] * L
        neg[l] = -1.0
        box.append((Posynomial.monomial(a.offset, tuple(neg)), 1.0))

    return ParametrizedSystem(
        mats, varying, chain, L, cost=Posynomial(cost_terms), constraints=box
    )


def transformed_budget(p: BetHedgingParams) -> float:
    """Budget for the shifted variables: dose budget plus offset cost."""
    return p.budget + sum(a.unit_cost * a.offset for a in p.antibiotics)


def dosing_problem(p: BetHedgingParams) -> BudgetProblem:
    return BudgetProblem(build_system(p), transformed_budget(p))


def optimize_dosing(
    p: BetHedgingParams, opts: SolverOptions | None = None
) -> OptimizationResult:
    """Spend the budget for the fastest certified population decay."""
    return solve_budget(dosing_problem(p), opts)


def truncation_mass(scale: float, shape: float, horizon: float) -> float:
    """Upper-tail probability removed by truncating the Weibull law."""
    return float(np.exp(-((horizon / scale) ** shape)))


def _truncated_mean(scale: float, shape: float, horizon: float) -> float:
    return TruncatedWeibull(scale, shape, horizon).mean()


def weibull_scale_for_mean(mean: float, shape: float, horizon: float) -> float:
    """Scale whose truncated-Weibull mean matches the target.

    The truncated mean grows with the scale, so this is a bracketed
    1-D root find; the bracket expands upward until it straddles the
    target or provably cannot (truncation caps the reachable mean).
    """
    if not (0.0 < mean < horizon):
        raise ValueError(f"mean must lie in (0, horizon), got {mean!r}")
    lo = 0.05 * mean
    hi = 2.0 * mean
    if _truncated_mean(lo, shape, horizon) >= mean:
        lo = 1e-3 * mean
    while _truncated_mean(hi, shape, horizon) < mean:
        hi *= 2.0
        if hi > 64.0 * horizon:
            raise ValueError(
                f"no scale reaches mean {mean} at shape {shape} under truncation at {horizon}"
            )
    return float(
        brentq(lambda lam: _truncated_mean(lam, shape, horizon) - mean, lo, hi, xtol=1e-10)
    )


def weibull_shape_for_mean(
    mean: float, scale: float, horizon: float, shape_lo: float = 0.2, shape_hi: float = 50.0
) -> float:
    """Shape whose truncated-Weibull mean matches the target.

    The truncated mean is not monotone in the shape, so up to three
    roots can coexist at one scale. Of these, the one closest to shape 1
    (in log) is returned: that is the branch obtained by continuously
    deforming the exponential case, which is what the sojourn-shape
    sweep trades against the scale.
    """
    if not (0.0 < mean < horizon):
        raise ValueError(f"mean must lie in (0, horizon), got {mean!r}")
    grid = np.geomspace(shape_lo, shape_hi, 160)
    vals = []
    for k in grid:
        # shapes far below 1 concentrate too much mass at 0 for the
        # quadrature self-check; treat them as outside the family
        try:
            vals.append(_truncated_mean(scale, k, horizon) - mean)
        except ValueError:
            vals.append(np.nan)
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if np.isnan(fa) or np.isnan(fb):
            continue
        if fa == 0.0:
            roots.append(float(a))
        elif fa * fb < 0.0:
            roots.append(
                float(
                    brentq(
                        lambda k: _truncated_mean(scale, k, horizon) - mean,
                        a,
                        b,
                        xtol=1e-10,
                    )
                )
            )
    if not roots:
        raise ValueError(
            f"no shape in [{shape_lo}, {shape_hi}] attains mean {mean} at scale {scale} "
            f"under truncation at {horizon}"
        )
    return min(roots, key=lambda k: abs(np.log(k)))


@dataclass(frozen=True)
class SweepPoint:
    coords: tuple[float, ...]
    gamma: float
    theta: tuple[float, ...] | None
    status: str


@dataclass(frozen=True)
class SweepResult:
    """One optimized decay rate per grid point, plus a reference rate.

    baseline is the optimized rate with exponential sojourns of the same
    mean (NaN when the sweep has no such reference); metadata records
    the conventions the grid was generated under.
    """

    axes: tuple[str, ...]
    points: tuple[SweepPoint, ...]
    baseline: float
    metadata: dict

    @property
    def grid(self) -> list[tuple[float, ...]]:
        return [pt.coords for pt in self.points]

    @property
    def gamma_star(self) -> NDArray[np.float64]:
        return np.array([pt.gamma for pt in self.points])

    @property
    def theta_star(self) -> list[tuple[float, ...] | None]:
        return [pt.theta for pt in self.points]


def _solve_point(p: BetHedgingParams, coords, opts) -> SweepPoint:
    # a sweep must survive individual failures, so solver errors become
    # recorded statuses rather than raised exceptions
    try:
        res = optimize_dosing(p, opts)
    except (NumericalError, ValueError) as exc:
        return SweepPoint(tuple(coords), np.nan, None, f"error: {exc}")
    theta = None if res.status == "infeasible" else tuple(res.theta_star)
    return SweepPoint(tuple(coords), float(res.achieved_rate), theta, res.status)


def sweep_sojourn_shape(
    p: BetHedgingParams,
    scale12_grid,
    shape21_grid,
    hold_mean: bool = True,
    mean: float = 6.0,
    opts: SolverOptions | None = None,
) -> SweepResult:
    """Optimized decay rate over sojourn-law variations on a 2-state chain.

    The 0->1 edge is swept by scale; with hold_mean the shape of that
    edge co-varies to keep its mean pinned, otherwise the shape stays at
    its value in p and the realized mean drifts (metadata labels which
    convention produced the numbers). The 1->0 edge is swept by shape
    with its scale always re-solved to hold the mean. The baseline is
    the fully exponential chain (both shapes 1) at the same mean.
    """
    if p.N != 2:
        raise ValueError("the sojourn-shape sweep is defined for exactly two environments")
    scale12_grid = [float(s) for s in scale12_grid]
    shape21_grid = [float(k) for k in shape21_grid]
    if not scale12_grid or not shape21_grid:
        raise ValueError("sweep grids must be nonempty")

    lam_markov = weibull_scale_for_mean(mean, 1.0, p.horizon)
    baseline = optimize_dosing(p.with_sojourn(lam_markov, 1.0), opts)

    points = []
    worst_tail = 0.0
    shape12 = []
    for lam12 in scale12_grid:
        try:
            if hold_mean:
                k12 = weibull_shape_for_mean(mean, lam12, p.horizon)
            else:
                k12 = float(p.sojourn_shape[0][1])
            shape12.append((lam12, k12))
        except ValueError as exc:
            # the whole row shares this edge law; record it, keep sweeping
            for k21 in shape21_grid:
                points.append(SweepPoint((lam12, k21), np.nan, None, f"error: {exc}"))
            continue
        for k21 in shape21_grid:
            try:
                lam21 = weibull_scale_for_mean(mean, k21, p.horizon)
            except ValueError as exc:
                points.append(SweepPoint((lam12, k21), np.nan, None, f"error: {exc}"))
                continue
            scale = np.array([[1.0, lam12], [lam21, 1.0]])
            shape = np.array([[1.0, k12], [k21, 1.0]])
            worst_tail = max(
                worst_tail,
                truncation_mass(lam12, k12, p.horizon),
                truncation_mass(lam21, k21, p.horizon),
            )
            points.append(
                _solve_point(p.with_sojourn(scale, shape), (lam12, k21), opts)
            )

    return SweepResult(
        axes=("scale12", "shape21"),
        points=tuple(points),
        baseline=float(baseline.achieved_rate),
        metadata={
            "mean": mean,
            "mean_convention": "held" if hold_mean else "scale-free",
            "horizon": p.horizon,
            "max_truncation_mass": worst_tail,
            "baseline_scale": lam_markov,
            "baseline_status": baseline.status,
            "shape12_by_scale": tuple(shape12),
        },
    )


def sweep_dose_response(
    p: BetHedgingParams,
    sharpness_grid,
    budget_grid,
    opts: SolverOptions | None = None,
) -> SweepResult:
    """Optimized decay rate over dose-response sharpness and budget."""
    sharpness_grid = [float(q) for q in sharpness_grid]
    budget_grid = [float(b) for b in budget_grid]
    if not sharpness_grid or not budget_grid:
        raise ValueError("sweep grids must be nonempty")
    points = []
    for q in sharpness_grid:
        shaped = p.with_sharpness(q)
        for budget in budget_grid:
            points.append(_solve_point(shaped.with_budget(budget), (q, budget), opts))
    return SweepResult(
        axes=("sharpness", "budget"),
        points=tuple(points),
        baseline=np.nan,
        metadata={"horizon": p.horizon},
    )


def write_sweep_csv(result: SweepResult, path) -> None:
    """One row per grid point: coordinates, rate, design, status, baseline."""
    width = max((len(pt.theta) for pt in result.points if pt.theta), default=0)
    header = list(result.axes) + ["gamma_star"]
    header += [f"theta_{l}" for l in range(width)]
    header += ["status", "baseline"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for pt in result.points:
            theta = list(pt.theta) if pt.theta else [np.nan] * width
            theta += [np.nan] * (width - len(theta))
            row = [f"{c:.10g}" for c in pt.coords]
            row.append(f"{pt.gamma:.10g}")
            row += [f"{t:.10g}" for t in theta]
            row.append(pt.status)
            row.append(f"{result.baseline:.10g}")
            writer.writerow(row)
