import numpy as np
import pytest

from smjls import (
    ZERO,
    DiracSojourn,
    Monomial,
    NumericalError,
    ParametrizedSystem,
    Posynomial,
    SemiMarkovSpec,
    TruncatedExponential,
    TruncatedWeibull,
    UniformSojourn,
    assemble_kernel,
    decay_rate,
    is_mean_stable,
    log_rho,
    log_rho_grad,
    spectral_radius,
)
from smjls.system import KernelBuilder
from conftest import random_metzler, random_two_mode_system
from oracles import markov_mean_rate, scalar_decay_root, scalar_kernel_value


def single_mode_system(a_matrix, dist):
    chain = SemiMarkovSpec(np.array([[1.0]]), [[dist]])
    return ParametrizedSystem.constant([np.atleast_2d(a_matrix)], chain)


def two_cycle_chain(d01, d10):
    P = np.array([[0.0, 1.0], [1.0, 0.0]])
    return SemiMarkovSpec(P, [[None, d01], [d10, None]])


class TestSojournDistributions:
    def test_weibull_density_formula(self):
        lam, k, T = 1.3, 2.4, 5.0
        d = TruncatedWeibull(lam, k, T)
        tau = 0.9
        raw = (k / lam) * (tau / lam) ** (k - 1.0) * np.exp(-((tau / lam) ** k))
        norm = 1.0 / (1.0 - np.exp(-((T / lam) ** k)))
        assert d.density(tau) == pytest.approx(norm * raw, rel=1e-14)
        assert d.density(0.0) == 0.0
        assert d.density(T + 0.1) == 0.0
        assert d.normalizer >= 1.0

    def test_masses_integrate_to_one(self):
        dists = [
            TruncatedWeibull(1.0, 0.5, 4.0),   # singular density at 0+
            TruncatedWeibull(2.0, 1.0, 4.0),
            TruncatedWeibull(1.5, 3.7, 4.0),
            TruncatedExponential(0.8, 4.0),
            UniformSojourn(4.0),
        ]
        for d in dists:
            tau, w = d.rule(256)
            assert np.sum(w) == pytest.approx(1.0, abs=1e-10)
            assert np.all(tau > 0.0) and np.all(tau <= d.horizon + 1e-12)

    def test_quantile_inverts_cdf(self):
        rng = np.random.default_rng(53)
        for d in [
            TruncatedWeibull(1.2, 0.7, 5.0),
            TruncatedWeibull(2.0, 4.0, 5.0),
            TruncatedExponential(1.1, 5.0),
            UniformSojourn(5.0),
        ]:
            u = rng.uniform(0.01, 1.0, 50)
            assert np.allclose(d.cdf(d.quantile(u)), u, atol=1e-12)

    def test_truncation_renormalizes(self):
        # exponential rate 1 truncated at 1: mass below horizon is 1 - 1/e
        d = TruncatedExponential(1.0, 1.0)
        assert d.normalizer == pytest.approx(1.0 / (1.0 - np.exp(-1.0)), rel=1e-14)
        assert d.cdf(1.0) == pytest.approx(1.0, abs=1e-14)

    def test_mean_against_quadrature(self):
        d = TruncatedWeibull(6.67, 5.0, 30.0)
        # scale * Gamma(1.2), truncation negligible at this horizon
        from scipy.special import gamma
        assert d.mean() == pytest.approx(6.67 * gamma(1.2), rel=1e-10)

    def test_dirac(self):
        d = DiracSojourn(2.0, 5.0)
        assert d.is_dirac
        assert d.mean() == 2.0
        assert d.quantile(0.73) == 2.0
        assert d.cdf(1.9) == 0.0 and d.cdf(2.0) == 1.0
        with pytest.raises(ValueError):
            d.density(1.0)
        with pytest.raises(ValueError):
            d.rule(16)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            TruncatedWeibull(-1.0, 2.0, 5.0)
        with pytest.raises(ValueError):
            TruncatedWeibull(1.0, 0.0, 5.0)
        with pytest.raises(ValueError):
            TruncatedExponential(1.0, -2.0)
        with pytest.raises(ValueError):
            DiracSojourn(6.0, 5.0)

    def test_spiky_weibull_rejected_at_construction(self):
        # a near-delta density no escalated quadrature check can integrate
        with pytest.raises(ValueError, match="integrates"):
            TruncatedWeibull(3.0, 200.0, 6.0)

    def test_moderately_spiky_weibull_constructs(self):
        # resolvable at the escalated node counts even though 256 is not enough
        TruncatedWeibull(3.0, 60.0, 6.0)


class TestSemiMarkovSpec:
    def test_rejects_non_stochastic(self):
        d = UniformSojourn(1.0)
        with pytest.raises(ValueError, match="sum to 1"):
            SemiMarkovSpec(np.array([[0.5, 0.4], [1.0, 0.0]]), [[None, d], [d, None]])

    def test_warns_on_self_transitions(self):
        d = UniformSojourn(1.0)
        P = np.array([[0.5, 0.5], [1.0, 0.0]])
        with pytest.warns(UserWarning, match="self-transitions"):
            SemiMarkovSpec(P, [[d, d], [d, None]])

    def test_single_mode_self_loop_is_silent(self):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            SemiMarkovSpec(np.array([[1.0]]), [[UniformSojourn(1.0)]])

    def test_missing_edge_law(self):
        d = UniformSojourn(1.0)
        with pytest.raises(ValueError, match="no sojourn law"):
            SemiMarkovSpec(np.array([[0.0, 1.0], [1.0, 0.0]]), [[None, d], [None, None]])

    def test_horizon_mismatch(self):
        with pytest.raises(ValueError, match="horizon"):
            two_cycle_chain(UniformSojourn(1.0), UniformSojourn(2.0))

    def test_per_mode_replicates_rows(self):
        P = np.array([[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.3, 0.7, 0.0]])
        dists = [UniformSojourn(2.0), TruncatedExponential(1.0, 2.0), DiracSojourn(1.0, 2.0)]
        spec = SemiMarkovSpec.per_mode(P, dists)
        for i in range(3):
            for j in range(3):
                assert spec.sojourn[i][j] is dists[i]


class TestParametrizedSystem:
    def test_mode_matrix_evaluation(self):
        # A(theta) = [[-3 + theta0^-1, 0.5], [0, -1]]
        varying = [[[Posynomial.monomial(1.0, (-1.0,)), ZERO], [ZERO, ZERO]]]
        sys_ = ParametrizedSystem(
            [np.array([[-3.0, 0.5], [0.0, -1.0]])],
            varying,
            SemiMarkovSpec(np.array([[1.0]]), [[UniformSojourn(1.0)]]),
            param_dim=1,
        )
        A = sys_.mode_matrix(0, [2.0])
        assert A[0, 0] == pytest.approx(-2.5)
        assert A[0, 1] == 0.5

    def test_rejects_non_metzler_constant(self):
        chain = SemiMarkovSpec(np.array([[1.0]]), [[UniformSojourn(1.0)]])
        with pytest.raises(ValueError, match="Metzler"):
            ParametrizedSystem.constant([np.array([[1.0, -0.1], [0.0, 1.0]])], chain)

    def test_rejects_bad_theta(self):
        sys_ = random_two_mode_system(np.random.default_rng(0), n=2)
        with pytest.raises(ValueError):
            sys_.mode_matrix(0, [1.0])  # wrong length for param_dim 0
        varying = [[[Posynomial.monomial(1.0, (-1.0,)), ZERO], [ZERO, ZERO]]]
        sys2 = ParametrizedSystem(
            [np.array([[-3.0, 0.5], [0.0, -1.0]])],
            varying,
            SemiMarkovSpec(np.array([[1.0]]), [[UniformSojourn(1.0)]]),
            param_dim=1,
        )
        with pytest.raises(ValueError):
            sys2.mode_matrix(0, [-1.0])


class TestKernel:
    def test_scalar_dirac_kernel(self):
        sys_ = single_mode_system(np.array([[-2.0]]), DiracSojourn(0.7, 2.0))
        for g in (0.0, 0.5, 2.0):
            K = assemble_kernel(sys_, (), g)
            assert K.matrix.shape == (1, 1)
            assert K.matrix[0, 0] == pytest.approx(np.exp((g - 2.0) * 0.7), rel=1e-13)

    def test_blocks_match_direct_integrals(self):
        # asymmetric two-cycle: block (i, j) must pair mode j's dynamics
        # with the sojourn attached to the edge j -> i
        a0, a1 = -1.5, -0.4
        d01 = TruncatedWeibull(0.8, 2.0, 4.0)
        d10 = TruncatedExponential(1.3, 4.0)
        sys_ = ParametrizedSystem.constant(
            [np.array([[a0]]), np.array([[a1]])], two_cycle_chain(d01, d10)
        )
        g = 0.3
        K = assemble_kernel(sys_, (), g)
        assert K.blocks[0][0] is None and K.blocks[1][1] is None
        assert K.blocks[1][0][0, 0] == pytest.approx(scalar_kernel_value(a0, d01, g), rel=1e-9)
        assert K.blocks[0][1][0, 0] == pytest.approx(scalar_kernel_value(a1, d10, g), rel=1e-9)

    def test_radius_increasing_in_g(self):
        rng = np.random.default_rng(61)
        for _ in range(10):
            sys_ = random_two_mode_system(rng)
            builder = KernelBuilder(sys_, ())
            radii = [builder.radius(g).radius for g in (-0.5, 0.0, 0.4, 0.8, 1.6)]
            assert all(r1 < r2 for r1, r2 in zip(radii, radii[1:]))

    def test_quadrature_self_check_raises(self):
        # shape 20 passes the constructor mass check but 64 nodes cannot
        # hold the kernel to 1e-6; the assembly must say so
        spike = TruncatedWeibull(3.0, 20.0, 6.0)
        sys_ = single_mode_system(np.array([[-1.0]]), spike)
        with pytest.raises(NumericalError, match="self-check"):
            assemble_kernel(sys_, (), 0.0, nodes=64)
        # honest escalation: more nodes resolve the same density
        assemble_kernel(sys_, (), 0.0, nodes=512)


class TestDecayRate:
    def test_scalar_root_all_kinds(self):
        a = -2.0
        kinds = [
            DiracSojourn(0.8, 3.0),
            UniformSojourn(3.0),
            TruncatedExponential(1.2, 3.0),
            TruncatedWeibull(0.9, 1.7, 3.0),
            TruncatedWeibull(0.9, 0.6, 3.0),
        ]
        for dist in kinds:
            sys_ = single_mode_system(np.array([[a]]), dist)
            report = decay_rate(sys_, ())
            root = scalar_decay_root(a, dist)
            assert report.gamma == pytest.approx(root, abs=1e-6)
            assert report.stable and not report.extension

    def test_dirac_single_mode_is_perron_root(self):
        rng = np.random.default_rng(67)
        A = random_metzler(rng, 3, diag=(-4.0, -2.0), off=(0.0, 0.8))
        sys_ = single_mode_system(A, DiracSojourn(0.5, 2.0))
        report = decay_rate(sys_, (), tol=1e-10)
        lam = np.max(np.linalg.eigvals(A).real)
        assert report.gamma == pytest.approx(-lam, abs=1e-8)

    def test_markov_limit_matches_generator(self):
        # shape-1 sojourns with a long horizon reduce to a Markov chain
        rng = np.random.default_rng(71)
        n = 2
        mats = [random_metzler(rng, n) for _ in range(2)]
        q = np.array([1.4, 0.6])
        T = 50.0 / q.min()
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        chain = SemiMarkovSpec.per_mode(P, [TruncatedExponential(q[i], T) for i in range(2)])
        sys_ = ParametrizedSystem.constant(mats, chain)
        got = decay_rate(sys_, ()).gamma
        Q = np.diag(q) @ (P - np.eye(2))
        want = markov_mean_rate(mats, Q)
        assert got == pytest.approx(want, rel=1e-6)

    def test_stability_flag_consistent_with_gamma(self):
        rng = np.random.default_rng(73)
        for _ in range(20):
            sys_ = random_two_mode_system(rng)
            report = decay_rate(sys_, ())
            assert report.stable == (report.gamma > 0.0)
            assert report.extension == (not report.stable)
            lo, hi = report.bracket
            assert lo <= report.gamma <= hi and hi - lo <= 1e-9

    def test_is_mean_stable_agrees_with_gamma(self):
        rng = np.random.default_rng(79)
        for _ in range(5):
            sys_ = random_two_mode_system(rng, stable=True)
            gamma = decay_rate(sys_, ()).gamma
            for frac in np.linspace(0.1, 1.9, 20):
                g = float(frac * gamma)
                if abs(g - gamma) < 1e-7:
                    continue
                assert is_mean_stable(sys_, (), g) == (g < gamma)

    def test_unstable_system_flagged_as_extension(self):
        A0 = np.array([[0.4, 0.1], [0.1, 0.3]])  # pure growth in one mode
        A1 = np.array([[-0.2, 0.0], [0.0, -0.1]])
        sys_ = ParametrizedSystem.constant(
            [A0, A1], two_cycle_chain(UniformSojourn(2.0), UniformSojourn(2.0))
        )
        report = decay_rate(sys_, ())
        assert not report.stable and report.extension
        assert report.gamma < 0.0

    def test_is_mean_stable_requires_positive_margin(self):
        sys_ = single_mode_system(np.array([[-1.0]]), UniformSojourn(1.0))
        with pytest.raises(ValueError):
            is_mean_stable(sys_, (), 0.0)

    def test_node_doubling_stability(self):
        rng = np.random.default_rng(83)
        sys_ = random_two_mode_system(rng, stable=True)
        g64 = decay_rate(sys_, (), nodes=64).gamma
        g128 = decay_rate(sys_, (), nodes=128).gamma
        assert abs(g64 - g128) < 1e-6


def bet_hedging_like_system():
    """Small two-parameter system for log-space differential tests."""
    n = 2
    denom = 10.0 ** -0.5 - 11.0 ** -0.5
    varying = []
    mats = []
    for k in range(2):
        base = np.array([[-2.2 + 0.3 * k, 0.2], [0.4, -1.8 - 0.2 * k]])
        mats.append(base)
        grid = [[ZERO] * n for _ in range(n)]
        for i in range(n):
            grid[i][i] = Posynomial(
                [Monomial(1.0 / denom, (-0.5, 0.0)), Monomial(0.7 / denom, (0.0, -0.5))]
            )
        varying.append(grid)
    chain = two_cycle_chain(TruncatedWeibull(1.0, 2.0, 5.0), TruncatedExponential(1.0, 5.0))
    cost = Posynomial([Monomial(1.0, (1.0, 0.0)), Monomial(1.0, (0.0, 1.0))])
    box = [
        (Posynomial.monomial(1.0 / 11.0, (1.0, 0.0)), 1.0),
        (Posynomial.monomial(10.0, (-1.0, 0.0)), 1.0),
        (Posynomial.monomial(1.0 / 11.0, (0.0, 1.0)), 1.0),
        (Posynomial.monomial(10.0, (0.0, -1.0)), 1.0),
    ]
    return ParametrizedSystem(mats, varying, chain, 2, cost=cost, constraints=box)


class TestLogRho:
    def test_matches_plain_radius(self):
        sys_ = bet_hedging_like_system()
        u = np.log([10.3, 10.6])
        v = np.log(0.2)
        K = assemble_kernel(sys_, np.exp(u), np.exp(v))
        want = np.log(spectral_radius(K.matrix).radius)
        assert log_rho(sys_, u, v) == pytest.approx(want, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        sys_ = bet_hedging_like_system()
        rng = np.random.default_rng(89)
        for _ in range(5):
            u = np.log(rng.uniform(10.05, 10.95, 2))
            v = float(np.log(rng.uniform(0.05, 0.4)))
            gu, gv = log_rho_grad(sys_, u, v)
            fd = np.empty(3)
            h = 1e-6
            for d in range(2):
                e = np.zeros(2)
                e[d] = h
                fd[d] = (log_rho(sys_, u + e, v) - log_rho(sys_, u - e, v)) / (2 * h)
            fd[2] = (log_rho(sys_, u, v + h) - log_rho(sys_, u, v - h)) / (2 * h)
            assert np.allclose(gu, fd[:2], rtol=1e-4, atol=1e-8)
            assert gv == pytest.approx(fd[2], rel=1e-4, abs=1e-8)

    def test_joint_midpoint_convexity(self):
        sys_ = bet_hedging_like_system()
        rng = np.random.default_rng(97)
        for _ in range(50):
            u1, u2 = np.log(rng.uniform(10.05, 10.95, (2, 2)))
            v1, v2 = np.log(rng.uniform(0.02, 0.5, 2))
            mid = log_rho(sys_, 0.5 * (u1 + u2), 0.5 * (v1 + v2))
            avg = 0.5 * (log_rho(sys_, u1, v1) + log_rho(sys_, u2, v2))
            assert mid <= avg + 1e-8
