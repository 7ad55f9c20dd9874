import itertools
import math

import numpy as np
import pytest

from mfldp.expr import parse_rate_expr
from mfldp.lln import drift
from mfldp.model import (
    LatticePoint,
    ModelSpec,
    StateSpace,
    TupleTransition,
    builtin_model,
    nearest_lattice_point,
    validation_grid,
)
from mfldp.rates import (
    build_rate_table,
    classify_transitions,
    effective_matrix,
    finite_n_rates,
    limit_rates,
    rate_estimate_report,
    tuple_count,
)


def brute_force_tuple_count(counts, tup):
    """Enumerate ordered tuples of distinct labeled particles directly."""
    states = []
    for s, c in enumerate(counts, start=1):
        states.extend([s] * c)
    n = len(states)
    k = len(tup)
    return sum(
        1
        for combo in itertools.permutations(range(n), k)
        if all(states[i] == t for i, t in zip(combo, tup))
    )


class TestTupleCount:
    def test_examples(self):
        assert tuple_count(3, (1, 1), LatticePoint([2, 1], 3)) == 2
        assert tuple_count(5, (1, 2), LatticePoint([2, 3], 5)) == 6
        assert tuple_count(2, (1, 1, 1), LatticePoint([2, 0], 2)) == 0

    def test_population_mismatch(self):
        with pytest.raises(Exception):
            tuple_count(4, (1,), LatticePoint([2, 1], 3))

    def test_against_enumeration(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            d = int(rng.integers(2, 4))
            n = int(rng.integers(2, 9))
            counts = rng.multinomial(n, np.ones(d) / d)
            k = int(rng.integers(1, 4))
            tup = tuple(int(s) for s in rng.integers(1, d + 1, size=k))
            lp = LatticePoint(counts, n)
            assert tuple_count(n, tup, lp) == brute_force_tuple_count(counts, tup)


class TestFiniteRates:
    def test_cw_half(self):
        cw = builtin_model("curie-weiss", {"beta": 1.0})
        table = finite_n_rates(cw, 4)
        lam = table.finite_n_rates_at(LatticePoint([2, 2], 4))
        j = table.index_of_delta((-1, 1))
        assert lam[j] == pytest.approx(0.5)

    def test_eg3_pair_at_barycenter(self):
        eg3 = builtin_model("eg3")
        table = finite_n_rates(eg3, 4)
        lam = table.finite_n_rates_at(LatticePoint([1, 1, 1, 1], 4))
        j = table.index_of_delta((-1, -1, 1, 1))
        # one listed pair transition; its permuted copy doubles c5/32
        assert lam[j] == pytest.approx(1.0 / 16.0)

    def test_vertex_vanishes(self):
        eg3 = builtin_model("eg3")
        table = finite_n_rates(eg3, 6)
        lam = table.finite_n_rates_at(LatticePoint([6, 0, 0, 0], 6))
        j = table.index_of_delta((-1, -1, 1, 1))
        assert lam[j] == 0.0

    def test_population_below_K(self):
        eg3 = builtin_model("eg3")
        with pytest.raises(Exception):
            finite_n_rates(eg3, 1)


class TestLimitRates:
    def test_cw_values(self):
        cw = builtin_model("curie-weiss", {"beta": 1.0})
        table = limit_rates(cw)
        lam = table.limit_rates_at([0.3, 0.7])
        down = table.index_of_delta((1, -1))
        up = table.index_of_delta((-1, 1))
        assert lam[down] == pytest.approx(0.7 * math.exp(-0.8))
        assert lam[up] == pytest.approx(0.3)
        center = table.limit_rates_at([0.5, 0.5])
        assert center[up] == pytest.approx(0.5) and center[down] == pytest.approx(0.5)

    def test_eg3_pair_rate(self):
        eg3 = builtin_model("eg3", {"c5": 2.0})
        table = limit_rates(eg3)
        x = np.array([0.1, 0.2, 0.3, 0.4])
        j = table.index_of_delta((-1, -1, 1, 1))
        assert table.limit_rates_at(x)[j] == pytest.approx(0.1 * 0.2 * 2.0)

    def test_finite_to_limit_convergence(self):
        # |lam^n(x_n) - lam(x)| <= c/n with c fitted at n = 100
        for name in ("curie-weiss", "arn", "eg3"):
            spec = builtin_model(name)
            table = limit_rates(spec)
            x = np.full(spec.d, 1.0 / spec.d) * 0.6 + 0.4 * np.eye(spec.d)[0]
            gaps = {}
            for n in (100, 1000, 10_000):
                lp = nearest_lattice_point(x, n)
                lam_n = table.finite_n_rates_batch(lp.counts.astype(float), n)
                lam = table.limit_rates_at(lp.counts / n)
                gaps[n] = float(np.abs(lam_n - lam).max())
            c = gaps[100] * 100 * 1.2 + 1e-9
            assert gaps[1000] <= c / 1000
            assert gaps[10_000] <= c / 10_000

    def test_total_exit_rate_consistency(self):
        # the simulator's total intensity is n * sum_v lam_v^n(x)
        cw = builtin_model("curie-weiss")
        table = finite_n_rates(cw, 10)
        lp = LatticePoint([3, 7], 10)
        lam = table.finite_n_rates_at(lp)
        # k = 1: n * lam_v^n = (number in source state) * flip rate
        x = lp.counts / 10
        up = table.index_of_delta((-1, 1))
        expected = 3 * next(
            t for t in cw.transitions if t.frm == (1,)
        ).rate.evaluate(x)
        assert 10 * lam[up] == pytest.approx(expected)


class TestEffectiveMatrix:
    def test_lln_coincidence_on_grid(self):
        for name in ("curie-weiss", "arn", "eg3"):
            spec = builtin_model(name)
            table = limit_rates(spec)
            for x in validation_grid(spec.d)[:40]:
                lhs = drift(table, x)
                rhs = x @ effective_matrix(spec, x)
                assert np.abs(lhs - rhs).max() <= 1e-12

    def test_eg3_entries(self):
        eg3 = builtin_model("eg3", {"c5": 2.0, "c6": 0.5})
        x = np.array([0.1, 0.2, 0.3, 0.4])
        G = effective_matrix(eg3, x)
        assert G[0, 2] == pytest.approx(0.2 * 2.0)  # x2 * c5
        assert G[1, 3] == pytest.approx(0.1 * 2.0)  # x1 * c5
        assert G[2, 0] == pytest.approx(0.4 * 0.5)  # x4 * c6
        assert G[3, 1] == pytest.approx(0.3 * 0.5)  # x3 * c6
        assert G[0, 1] == pytest.approx(1.0)

    def test_arn_entries(self):
        # single-transition parts follow the occupancy table; pair parts
        # follow the LLN-consistent effective matrix
        arn = builtin_model("arn", {"gamma": 1.0, "capacity": 2})
        x = np.array([0.7, 0.2, 0.1])
        G = effective_matrix(arn, x)
        assert G[1, 0] == pytest.approx(1.0)  # departure at occupancy 1
        assert G[2, 1] == pytest.approx(2.0)  # departure at occupancy 2
        assert G[0, 1] == pytest.approx(1.0 + 0.1 * (1 - 0.1))

    def test_diagonal_negative_row_sums(self):
        eg3 = builtin_model("eg3")
        G = effective_matrix(eg3, [0.25] * 4)
        np.testing.assert_allclose(G.sum(axis=1), 0.0, atol=1e-14)


class TestRateTableStructure:
    def test_zero_rate_direction_excluded(self):
        spec = ModelSpec(
            StateSpace(2),
            (
                TupleTransition((1,), (2,), parse_rate_expr("1.0")),
                TupleTransition((2,), (1,), parse_rate_expr("0.0")),
            ),
        )
        table = build_rate_table(spec)
        assert [v.delta for v in table.directions] == [(-1, 1)]

    def test_classification(self):
        spec = ModelSpec(
            StateSpace(2),
            (
                TupleTransition((1,), (2,), parse_rate_expr("1.0")),
                TupleTransition((2,), (1,), parse_rate_expr("x1")),
            ),
        )
        assert classify_transitions(spec) == ["positive", "mixed"]

    def test_negative_supports(self):
        eg3 = builtin_model("eg3")
        table = limit_rates(eg3)
        ns = {s.direction.delta: s for s in table.negative_supports()}
        assert ns[(-1, -1, 1, 1)].indices == (1, 2)
        assert ns[(-1, -1, 1, 1)].profiles == ({1: 1, 2: 1},)


class TestRateEstimateReport:
    def test_builtins_no_violations(self):
        for name in ("curie-weiss", "eg3", "arn"):
            constants, findings = rate_estimate_report(builtin_model(name))
            assert findings == []
            assert constants["C_hat"] > 0
            assert constants["c0"] > 0

    def test_eg3_vertex_consistency(self):
        # lam vanishing with the negative-support product is consistent
        eg3 = builtin_model("eg3")
        table = limit_rates(eg3)
        j = table.index_of_delta((-1, -1, 1, 1))
        assert table.limit_rates_at([1.0, 0, 0, 0])[j] == 0.0
