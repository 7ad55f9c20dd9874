import math

import numpy as np
import pytest

from mfldp.ldp import (
    ActionReport,
    hamiltonian,
    local_rate,
    local_rate_primal,
    minimize_action,
    path_action,
    perturb_path,
    poisson_ell,
    quasipotential,
    reparametrization_check,
    sanov_cost,
    superlinearity_bound_check,
)
from mfldp.lln import drift, integrate_lln
from mfldp.model import ModelError, PiecewiseLinearPath, builtin_model
from mfldp.rates import limit_rates


@pytest.fixture(scope="module")
def cw_table():
    return limit_rates(builtin_model("curie-weiss", {"beta": 1.0}))


@pytest.fixture(scope="module")
def eg3_table():
    return limit_rates(builtin_model("eg3"))


@pytest.fixture(scope="module")
def cw_optimum(cw_table):
    return minimize_action(
        cw_table, [0.5, 0.5], [0.3, 0.7], 0.75, knots=25, max_iter=250,
        starts=("line", "perturb-1e-2"),
    )


def test_poisson_ell_values():
    assert poisson_ell(1.0) == 0.0
    assert poisson_ell(0.0) == 1.0
    assert poisson_ell(math.e) == pytest.approx(1.0)
    assert poisson_ell(-0.1) == math.inf


class TestHamiltonian:
    def test_zero_theta(self, cw_table):
        assert hamiltonian(cw_table, [0.3, 0.7], [0.0, 0.0]) == 0.0

    def test_gradient_at_zero_is_drift(self, cw_table):
        _, grad = hamiltonian(cw_table, [0.3, 0.7], [0.0, 0.0], order=1)
        np.testing.assert_allclose(grad, drift(cw_table, [0.3, 0.7]), atol=1e-14)

    def test_cw_value(self, cw_table):
        value = hamiltonian(cw_table, [0.5, 0.5], [0.0, 1.0])
        assert value == pytest.approx(0.5 * (math.e - 1) + 0.5 * (math.exp(-1) - 1))

    def test_derivatives_match_finite_differences(self, eg3_table):
        rng = np.random.default_rng(17)
        h = 1e-5
        for _ in range(10):
            x = rng.exponential(size=4)
            x /= x.sum()
            theta = rng.normal(scale=0.8, size=4)
            value, grad, hess = hamiltonian(eg3_table, x, theta, order=2)
            for i in range(4):
                e = np.eye(4)[i] * h
                fd = (
                    hamiltonian(eg3_table, x, theta + e)
                    - hamiltonian(eg3_table, x, theta - e)
                ) / (2 * h)
                assert fd == pytest.approx(grad[i], rel=1e-6, abs=1e-8)
                _, gp = hamiltonian(eg3_table, x, theta + e, order=1)
                _, gm = hamiltonian(eg3_table, x, theta - e, order=1)
                np.testing.assert_allclose(
                    (gp - gm) / (2 * h), hess[i], rtol=1e-6, atol=1e-8
                )


class TestLocalRate:
    def test_drift_gives_zero(self, cw_table):
        x = [0.3, 0.7]
        res = local_rate(cw_table, x, drift(cw_table, x))
        assert res.value <= 1e-12
        np.testing.assert_allclose(res.q, cw_table.limit_rates_at(x), atol=1e-9)

    def test_symmetric_pair_zero_velocity(self, cw_table):
        # at the symmetric point both rates are 1/2 and the drift vanishes
        res = local_rate(cw_table, [0.5, 0.5], [0.0, 0.0])
        assert res.value <= 1e-12

    def test_cw_against_frozen_primal_grid(self, cw_table):
        # independent oracle: 10^6-point grid search on the 1-d primal
        # (q_plus - q_minus = 0.3 at x = (0.5, 0.5), both rates 1/2)
        frozen = 0.044671263392908056
        res = local_rate(cw_table, [0.5, 0.5], [-0.3, 0.3])
        assert res.value == pytest.approx(frozen, abs=1e-6)
        primal = local_rate_primal(cw_table, [0.5, 0.5], [-0.3, 0.3])
        assert primal.value == pytest.approx(frozen, abs=1e-6)

    def test_first_order_condition(self, eg3_table):
        rng = np.random.default_rng(23)
        for _ in range(25):
            x = rng.exponential(size=4)
            x /= x.sum()
            beta = rng.normal(size=4)
            beta -= beta.mean()
            res = local_rate(eg3_table, x, beta)
            assert res.status == "converged"
            _, grad = hamiltonian(eg3_table, x, res.theta, order=1)
            assert np.abs(grad - beta).max() <= 1e-8
            assert abs(res.theta.sum()) <= 1e-9  # gauge

    def test_nonzero_sum_velocity_rejected(self, cw_table):
        with pytest.raises(ModelError):
            local_rate(cw_table, [0.5, 0.5], [0.3, 0.3])

    def test_outside_cone_is_infinite(self, eg3_table):
        res = local_rate(eg3_table, [1.0, 0, 0, 0], [0.0, 0.0, -0.5, 0.5])
        assert res.status == "infinite"
        assert res.value == math.inf
        assert res.ascent is not None
        assert np.linalg.norm(res.ascent) == pytest.approx(1.0)
        primal = local_rate_primal(eg3_table, [1.0, 0, 0, 0], [0.0, 0.0, -0.5, 0.5])
        assert primal.status == "infinite"

    def test_convexity_in_velocity(self, eg3_table):
        rng = np.random.default_rng(31)
        x = np.array([0.3, 0.3, 0.2, 0.2])
        for _ in range(10):
            b1, b2 = rng.normal(size=(2, 4))
            b1 -= b1.mean()
            b2 -= b2.mean()
            l1 = local_rate(eg3_table, x, b1).value
            l2 = local_rate(eg3_table, x, b2).value
            for lam in (0.25, 0.5, 0.75):
                mix = local_rate(eg3_table, x, lam * b1 + (1 - lam) * b2).value
                assert mix <= lam * l1 + (1 - lam) * l2 + 1e-8

    def test_dual_primal_agreement_sample(self):
        rng = np.random.default_rng(7)
        for name in ("curie-weiss", "eg3", "arn"):
            table = limit_rates(builtin_model(name))
            d = table.d
            for _ in range(30):
                x = rng.dirichlet(np.ones(d)) * (1 - 0.05 * d) + 0.05
                beta = rng.normal(scale=0.5, size=d)
                beta -= beta.mean()
                a = local_rate(table, x, beta).value
                b = local_rate_primal(table, x, beta).value
                assert abs(a - b) <= 1e-6

    def test_flow_inequality_at_primal_solutions(self, cw_table):
        # r ell(q/r) + r(e-1) >= q for the returned flows
        rng = np.random.default_rng(41)
        for _ in range(10):
            beta = rng.normal(scale=0.4, size=2)
            beta -= beta.mean()
            res = local_rate_primal(cw_table, [0.4, 0.6], beta)
            lam = cw_table.limit_rates_at([0.4, 0.6])
            for q, r in zip(res.q, lam):
                assert r * poisson_ell(q / r) + r * (math.e - 1) >= q - 1e-9


class TestPathAction:
    def test_lln_path_is_nearly_free(self, cw_table):
        flow = integrate_lln(cw_table, [0.2, 0.8], 1.0, 1e-3)
        path = PiecewiseLinearPath(flow.times, flow.states)
        report = path_action(cw_table, path)
        assert 0 <= report.value <= 1e-6
        assert report.value == pytest.approx(report.segment_values.sum())

    def test_constant_path_at_fixed_point(self, cw_table):
        path = PiecewiseLinearPath([0.0, 1.0], [[0.5, 0.5], [0.5, 0.5]])
        assert path_action(cw_table, path).value == 0.0

    def test_matches_riemann_refinement(self, cw_table):
        # straight CW path: 201-point midpoint Riemann oracle
        x0, x1 = np.array([0.5, 0.5]), np.array([0.2, 0.8])
        path = PiecewiseLinearPath([0.0, 1.0], [x0, x1])
        beta = x1 - x0
        ss = (np.arange(201) + 0.5) / 201
        riemann = np.mean(
            [local_rate(cw_table, x0 + s * (x1 - x0), beta).value for s in ss]
        )
        assert path_action(cw_table, path).value == pytest.approx(riemann, abs=1e-5)

    def test_infinite_segment_flagged(self, eg3_table):
        path = PiecewiseLinearPath(
            [0.0, 1.0], [[1.0, 0, 0, 0], [0.5, 0, 0.5, 0.0]]
        )
        report = path_action(eg3_table, path)
        assert report.value == math.inf
        assert report.diagnostics["infinite_segments"] == [0]


class TestSuperlinearity:
    def test_cw_large_velocity(self, cw_table):
        assert superlinearity_bound_check(cw_table, [0.5, 0.5], [-10.0, 10.0])

    def test_near_threshold(self, cw_table):
        norm = math.e * 1.01
        beta = np.array([-1.0, 1.0]) / math.sqrt(2) * norm
        assert superlinearity_bound_check(cw_table, [0.2, 0.8], beta)

    def test_requires_norm_above_e(self, cw_table):
        with pytest.raises(ModelError):
            superlinearity_bound_check(cw_table, [0.5, 0.5], [-0.1, 0.1])

    def test_scaling_stays_superlinear(self, cw_table):
        base = np.array([-1.0, 1.0]) / math.sqrt(2)
        ratios = []
        for s in (10.0, 100.0, 1000.0):
            value = local_rate(cw_table, [0.5, 0.5], s * base).value
            ratios.append(value / (s * math.log(s)))
        assert min(ratios) > 0.1


class TestPerturbPath:
    def test_rho_zero_identity(self, cw_table):
        path = PiecewiseLinearPath([0.0, 1.0], [[0.4, 0.6], [0.6, 0.4]])
        psi = perturb_path(cw_table, path, 0.0)
        np.testing.assert_allclose(
            psi.knots, path.resample(psi.times).knots, atol=1e-12
        )

    def test_rho_one_is_lln(self, cw_table):
        path = PiecewiseLinearPath([0.0, 1.0], [[0.4, 0.6], [0.6, 0.4]])
        psi = perturb_path(cw_table, path, 1.0)
        flow = integrate_lln(cw_table, [0.4, 0.6], 1.0, 1e-3)
        np.testing.assert_allclose(
            psi.knots, np.atleast_2d(flow.at(psi.times)), atol=1e-9
        )

    def test_lower_bound_by_flow(self, eg3_table):
        path = PiecewiseLinearPath(
            [0.0, 1.0], [[1.0, 0, 0, 0], [0.25, 0.25, 0.25, 0.25]]
        )
        rho = 0.125
        psi = perturb_path(eg3_table, path, rho)
        flow = integrate_lln(eg3_table, [1.0, 0, 0, 0], 1.0, 1e-3)
        ref = np.atleast_2d(flow.at(psi.times))
        assert np.all(psi.knots >= rho * ref - 1e-12)

    def test_action_control(self, cw_table, cw_optimum):
        # I(psi^rho) <= I(gamma) + eps(rho) with eps(rho) vanishing along
        # rho = 2^-k; the path is only numerically optimal, so eps can dip
        # slightly negative and the decay is asserted on |eps|
        base = cw_optimum.value
        eps = []
        for k in range(3, 11):
            psi = perturb_path(cw_table, cw_optimum.path, 2.0 ** (-k))
            eps.append(path_action(cw_table, psi).value - base)
        assert eps[-1] <= 0.05 * base + 1e-3
        magnitudes = [abs(e) for e in eps]
        assert magnitudes[-1] <= magnitudes[0] + 1e-12
        drops = sum(1 for a, b in zip(magnitudes, magnitudes[1:]) if b <= a + 1e-9)
        assert drops >= len(magnitudes) - 2


class TestContinuityBounds:
    def test_state_perturbation_bound(self, eg3_table):
        # L(x^rho, beta) <= (1 + c(rho)) L(x, beta) + c(rho) with c fitted
        # at rho = 0.1 and decreasing along {0.1, 0.01, 0.001}
        rng = np.random.default_rng(8)
        x = np.array([0.4, 0.3, 0.2, 0.1])
        bary = np.full(4, 0.25)
        betas = []
        for _ in range(10):
            b = rng.normal(scale=0.4, size=4)
            betas.append(b - b.mean())
        cs = []
        for rho in (0.1, 0.01, 0.001):
            xr = (1 - rho) * x + rho * bary
            c_needed = 0.0
            for b in betas:
                l0 = local_rate(eg3_table, x, b).value
                l1 = local_rate(eg3_table, xr, b).value
                # smallest c with l1 <= (1+c) l0 + c
                c_needed = max(c_needed, max(l1 - l0, 0.0) / (l0 + 1.0))
            cs.append(c_needed)
        assert cs[0] >= cs[1] >= cs[2] - 1e-12

    def test_path_start_continuity(self, cw_optimum):
        # ||gamma(t) - gamma(0)|| log(1/t) decreasing toward 0 at small t
        path = cw_optimum.path
        values = []
        for t in (1e-2, 1e-3, 1e-4):
            gap = np.linalg.norm(np.atleast_2d(path.evaluate(t))[0] - path.knots[0])
            values.append(gap * math.log(1.0 / t))
        assert values[0] >= values[1] >= values[2]
        assert values[2] < 0.05


class TestMinimizeAction:
    def test_lln_endpoint_is_nearly_free(self, cw_table):
        flow = integrate_lln(cw_table, [0.3, 0.7], 0.5, 1e-3)
        target = flow.states[-1]
        report = minimize_action(
            cw_table, [0.3, 0.7], target, 0.5, knots=25, max_iter=150,
            starts=("line",),
        )
        assert report.value <= 1e-4

    def test_value_below_straight_start(self, cw_table, cw_optimum):
        line = PiecewiseLinearPath(
            np.linspace(0, 0.75, 25),
            np.linspace([0.5, 0.5], [0.3, 0.7], 25),
        )
        assert cw_optimum.value <= path_action(cw_table, line).value + 1e-12
        assert cw_optimum.value >= 0

    def test_refinement_stability(self, cw_table, cw_optimum):
        fine = minimize_action(
            cw_table, [0.5, 0.5], [0.3, 0.7], 0.75, knots=50, max_iter=250,
            starts=("line", "perturb-1e-2"),
        )
        assert abs(fine.value - cw_optimum.value) <= 0.02 * cw_optimum.value

    def test_infeasible_everywhere(self):
        # a one-way model cannot reach a point requiring backward flow
        from mfldp.expr import parse_rate_expr
        from mfldp.model import ModelSpec, StateSpace, TupleTransition

        spec = ModelSpec(
            StateSpace(2), (TupleTransition((1,), (2,), parse_rate_expr("1.0")),)
        )
        table = limit_rates(spec)
        report = minimize_action(
            table, [0.5, 0.5], [0.9, 0.1], 0.5, knots=8, max_iter=30,
            starts=("line",),
        )
        assert report.value == math.inf
        assert "error" in report.diagnostics


class TestQuasipotential:
    def test_same_point_is_free(self, cw_table):
        value, report, _ = quasipotential(cw_table, [0.4, 0.6], [0.4, 0.6])
        assert value <= 1e-8

    def test_cw_positive_off_fixed_point(self):
        table = limit_rates(builtin_model("curie-weiss", {"beta": 0.5}))
        flow = integrate_lln(table, [0.2, 0.8], 30.0, 1e-2)
        xstar = flow.states[-1]
        np.testing.assert_allclose(xstar, [0.5, 0.5], atol=1e-6)
        value, report, per = quasipotential(
            table, xstar, [0.25, 0.75], horizons=(0.5, 1.0, 2.0),
            knots=20, max_iter=120, starts=("line", "perturb-1e-2"),
        )
        assert math.isfinite(value)
        assert value > 1e-4

    def test_waypoint_seeding_triangle(self, cw_table):
        opts = dict(horizons=(0.5, 1.0), knots=15, max_iter=80,
                    starts=("line", "perturb-1e-2"))
        x, y, z = [0.5, 0.5], [0.4, 0.6], [0.3, 0.7]
        vxy, _, _ = quasipotential(cw_table, x, y, **opts)
        vyz, _, _ = quasipotential(cw_table, y, z, **opts)
        vxz, _, _ = quasipotential(cw_table, x, z, waypoints=[np.array(y)], **opts)
        assert vxz <= vxy + vyz + 1e-6


def test_simplex_projection_kkt():
    # Euclidean projection onto the simplex: feasibility plus the
    # variational inequality <y - P(y), z - P(y)> <= 0 for simplex z
    from mfldp.ldp import _project_simplex

    rng = np.random.default_rng(55)
    for _ in range(200):
        d = int(rng.integers(2, 7))
        y = rng.normal(scale=3.0, size=d)
        p = _project_simplex(y[None, :])[0]
        assert p.min() >= 0 and p.sum() == pytest.approx(1.0, abs=1e-9)
        for _ in range(8):
            z = rng.dirichlet(np.ones(d))
            assert (y - p) @ (z - p) <= 1e-9


class TestSanov:
    def test_identical(self):
        assert sanov_cost([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_point_mass(self):
        assert sanov_cost([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))

    def test_support_violation(self):
        assert sanov_cost([0.5, 0.5], [1.0, 0.0]) == math.inf


class TestReparametrization:
    def test_identity_scaling(self, cw_table, cw_optimum):
        a, b = reparametrization_check(cw_table, cw_optimum.path, 1.0)
        assert a == pytest.approx(b, rel=1e-12)

    def test_near_one_bound(self, cw_table, cw_optimum):
        R = cw_table.rate_bound()
        nv = cw_table.nv
        R1 = nv * R * (math.e - 1)
        for c in (0.99, 1.01):
            base, scaled = reparametrization_check(cw_table, cw_optimum.path, c)
            bound = max(math.log(1 / c), c * math.log(c)) * (base + R1) + R * nv * abs(
                1 - 1 / c
            )
            assert abs(base - scaled) <= bound + 1e-9

    def test_doubled_lln_path_remains_cheap(self, cw_table):
        flow = integrate_lln(cw_table, [0.2, 0.8], 1.0, 1e-3)
        path = PiecewiseLinearPath(flow.times, flow.states)
        base, scaled = reparametrization_check(cw_table, path, 2.0)
        assert base <= 1e-4
        assert math.isfinite(scaled)

    def test_c_out_of_range(self, cw_table, cw_optimum):
        with pytest.raises(ModelError):
            reparametrization_check(cw_table, cw_optimum.path, 3.0)
