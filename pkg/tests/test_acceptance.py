"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with its measured numbers and elapsed time.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they
complete; the full suite takes roughly 10 minutes.
"""

import itertools
import math
import time

import numpy as np
import pytest

from mfldp.experiments import (
    run_bounds_suite,
    run_ldp_point_event,
    run_ldp_set_event,
    run_lln_convergence,
)
from mfldp.ldp import (
    local_rate,
    local_rate_primal,
    minimize_action,
    path_action,
    perturb_path,
    reparametrization_check,
)
from mfldp.model import LatticePoint, builtin_model, nearest_lattice_point
from mfldp.rates import finite_n_rates, limit_rates, tuple_count
from mfldp.simulate import (
    FinalStateEvent,
    batch_final_states,
    build_tilt_control,
    exact_transient,
    mc_rate_estimate,
    stream,
)
from mfldp.structure import (
    build_boundary_escape,
    build_interior_path,
    build_path_single_jump,
    check_single_ergodic,
    check_ue,
    escape_level_cap,
    is_k_ergodic,
    represent_direction,
)
from mfldp.model import direction_of


def report_line(num, ok, budget_s, elapsed, detail):
    flag = "PASS" if ok else "FAIL"
    print(
        f"\n[{flag}] criterion {num}: {detail} "
        f"(elapsed {elapsed:.1f}s, budget {budget_s:.0f}s)"
    )


def test_criterion_1_dual_primal_equality():
    """Dual and primal local-rate solvers agree to 1e-6 on 200 seeded pairs
    per built-in model with interior states."""
    t0 = time.time()
    worst = 0.0
    pairs = 0
    rng = np.random.default_rng(1234)
    for name in ("curie-weiss", "arn", "eg3"):
        table = limit_rates(builtin_model(name))
        d = table.d
        for _ in range(200):
            x = rng.dirichlet(np.ones(d)) * (1 - 0.05 * d) + 0.05
            beta = rng.normal(scale=0.6, size=d)
            beta -= beta.mean()
            a = local_rate(table, x, beta).value
            b = local_rate_primal(table, x, beta).value
            worst = max(worst, abs(a - b))
            pairs += 1
    elapsed = time.time() - t0
    ok = worst <= 1e-6 and elapsed <= 30
    report_line(1, ok, 30, elapsed,
                f"dual/primal equality on {pairs} pairs, worst gap {worst:.2e}")
    assert worst <= 1e-6
    assert elapsed <= 30


def test_criterion_2_locally_uniform_point_ldp():
    """Exact point-hitting decays extrapolate to the minimum action within
    5 percent (CW, target (0.3, 0.7) at t = 0.75)."""
    t0 = time.time()
    cw = builtin_model("curie-weiss", {"beta": 1.0})
    report, _ = run_ldp_point_event(
        cw, x0=(0.5, 0.5), target=(0.3, 0.7), t=0.75, ns=(50, 100, 200, 400)
    )
    elapsed = time.time() - t0
    ok = report["passed"] and elapsed <= 300
    report_line(
        2, ok, 300, elapsed,
        f"extrapolated {report['extrapolated_rate']:.6f} vs "
        f"J_t {report['min_action']:.6f} (gap {report['relative_gap']:.2%})",
    )
    assert report["relative_gap"] <= 0.05
    assert elapsed <= 300


def test_criterion_3_set_event_ldp():
    """Importance-sampled decays of the set event x1(1) >= 0.8 extrapolate to
    the minimum action over targets in the set, within 20 percent."""
    t0 = time.time()
    cw = builtin_model("curie-weiss", {"beta": 1.0})
    report, _ = run_ldp_set_event(
        cw, x0=(0.5, 0.5), level=0.8, coordinate=0, t=1.0,
        ns=(50, 100, 200, 400), reps=100_000,
    )
    elapsed = time.time() - t0
    ok = report["passed"] and elapsed <= 600
    report_line(
        3, ok, 600, elapsed,
        f"extrapolated {report['extrapolated_rate']:.6f} vs "
        f"min J_1 {report['min_action']:.6f} (gap {report['relative_gap']:.2%})",
    )
    assert report["relative_gap"] <= 0.2
    assert elapsed <= 600


def test_criterion_4_lln_at_scale():
    """At n = 10^4, at least 95 of 100 replicates stay within 0.03 sup-norm
    of the integrated LLN path, for CW and eg3."""
    t0 = time.time()
    results = {}
    for name in ("curie-weiss", "eg3"):
        report, _ = run_lln_convergence(builtin_model(name), n=10_000, reps=100)
        results[name] = report
    elapsed = time.time() - t0
    ok = all(r["within_tolerance"] >= 95 for r in results.values()) and elapsed <= 120
    detail = ", ".join(
        f"{k}: {v['within_tolerance']}/100 (max dev {v['max_deviation']:.4f})"
        for k, v in results.items()
    )
    report_line(4, ok, 120, elapsed, "LLN convergence " + detail)
    for r in results.values():
        assert r["within_tolerance"] >= 95
    assert elapsed <= 120


def test_criterion_5_structure_checkers_eg3():
    """eg3 is K-ergodic, fails both single-transition ergodicity checks
    (effective one on the boundary), and has uniformly positive rates."""
    t0 = time.time()
    eg3 = builtin_model("eg3")
    kerg, _ = is_k_ergodic(eg3)
    g2_ok, g2_counter = check_single_ergodic(eg3, "geff")
    g1_ok, _ = check_single_ergodic(eg3, "gamma1")
    ue_ok, _ = check_ue(eg3)
    elapsed = time.time() - t0
    boundary = g2_counter is not None and min(g2_counter) == 0.0
    ok = kerg and not g2_ok and boundary and not g1_ok and ue_ok
    report_line(
        5, ok, 5, elapsed,
        f"k_ergodic={kerg}, geff_ergodic={g2_ok} at {g2_counter}, "
        f"gamma1_ergodic={g1_ok}, ue={ue_ok}",
    )
    assert kerg and ue_ok
    assert not g2_ok and boundary
    assert not g1_ok
    assert elapsed <= 5


def test_criterion_6_bounds_suite():
    """Chain bound vs uniformization (20 chains), excursion bound vs 1e5
    runs, superlinear lower bound on the 10 x 10 x 3 grid, and the flow
    inequality at every converged primal solve."""
    t0 = time.time()
    cw = builtin_model("curie-weiss", {"beta": 1.0})
    report, rows = run_bounds_suite(cw, reps=100_000)
    elapsed = time.time() - t0
    counts = {}
    for r in rows:
        counts.setdefault(r["check"], [0, 0])
        counts[r["check"]][r["ok"]] += 1
    detail = ", ".join(f"{k}: {v[1]}/{v[0] + v[1]}" for k, v in sorted(counts.items()))
    ok = report["passed"] and elapsed <= 180
    report_line(6, ok, 180, elapsed, "bounds " + detail)
    assert report["passed"]
    assert elapsed <= 180


def test_criterion_7_constructive_paths():
    """Direction representations close to 1e-10 on all state pairs; boundary
    escape from every eg3 vertex with the decreasing-coordinate guard; all
    constructed paths telescope to their endpoints."""
    t0 = time.time()
    eg3 = builtin_model("eg3")
    cw = builtin_model("curie-weiss", {"beta": 1.0})
    worst_residual = 0.0
    for spec in (eg3, cw):
        d = spec.d
        for u, w in itertools.permutations(range(1, d + 1), 2):
            coeffs = represent_direction(spec, u, w)
            combo = sum(
                a * direction_of(t.frm, t.to, d).as_array() for t, a in coeffs
            )
            target = np.zeros(d)
            target[w - 1], target[u - 1] = 1.0, -1.0
            worst_residual = max(worst_residual, float(np.abs(combo - target).max()))
            assert all(a >= 0 for _, a in coeffs)
    a_level = escape_level_cap(eg3)
    worst_tel = 0.0
    guard_ok = True
    for i in range(4):
        cp = build_boundary_escape(eg3, np.eye(4)[i], a_level)
        worst_tel = max(worst_tel, cp.displacement_residual())
        assert cp.path.knots[-1].min() >= a_level - 1e-12
        for m, v in enumerate(cp.directions):
            ss = np.linspace(cp.path.times[m], cp.path.times[m + 1], 65)
            xs = np.atleast_2d(cp.path.evaluate(ss))
            for j, delta in enumerate(v.delta):
                if delta < 0 and xs[:, j].min() < a_level - 1e-9:
                    guard_ok = False
    for x, y in (([0.9, 0.1], [0.2, 0.8]), ([1.0, 0.0], [0.4, 0.6])):
        cp = build_path_single_jump(cw, x, y)
        worst_tel = max(worst_tel, cp.displacement_residual())
    cp = build_interior_path(eg3, [0.25] * 4, [0.4, 0.3, 0.2, 0.1], 0.05)
    worst_tel = max(worst_tel, cp.displacement_residual())
    elapsed = time.time() - t0
    ok = worst_residual <= 1e-10 and worst_tel <= 1e-10 and guard_ok
    report_line(
        7, ok, 60, elapsed,
        f"representation residual {worst_residual:.1e}, telescoping "
        f"{worst_tel:.1e}, escape guard {'held' if guard_ok else 'violated'}",
    )
    assert worst_residual <= 1e-10
    assert worst_tel <= 1e-10
    assert guard_ok


def test_criterion_8_perturbation_and_reparametrization():
    """Interior-perturbation action control and time-reparametrization
    continuity on 10 optimizer-produced paths."""
    t0 = time.time()
    cw = builtin_model("curie-weiss", {"beta": 1.0})
    table = limit_rates(cw)
    targets = [(0.3, 0.7), (0.35, 0.65), (0.25, 0.75), (0.4, 0.6), (0.2, 0.8)]
    horizons = (0.75, 1.0)
    R = table.rate_bound()
    nv = table.nv
    R1 = nv * R * (math.e - 1)
    paths = 0
    perturb_ok = reparam_ok = True
    for t_h in horizons:
        for target in targets:
            rep = minimize_action(
                table, [0.5, 0.5], np.array(target), t_h, knots=20,
                max_iter=120, starts=("line", "perturb-1e-2"),
            )
            paths += 1
            base = rep.value
            eps = []
            for k in range(3, 11):
                psi = perturb_path(table, rep.path, 2.0 ** (-k))
                eps.append(path_action(table, psi).value - base)
            if not (eps[-1] <= 0.05 * base + 1e-3 and abs(eps[-1]) <= abs(eps[0]) + 1e-12):
                perturb_ok = False
            for c in (0.99, 1.01):
                v0, vc = reparametrization_check(table, rep.path, c)
                bound = max(math.log(1 / c), c * math.log(c)) * (v0 + R1)
                bound += R * nv * abs(1 - 1 / c)
                if abs(v0 - vc) > bound + 1e-9:
                    reparam_ok = False
    elapsed = time.time() - t0
    ok = perturb_ok and reparam_ok
    report_line(
        8, ok, 300, elapsed,
        f"{paths} optimizer paths: perturbation control "
        f"{'held' if perturb_ok else 'violated'}, reparametrization bound "
        f"{'held' if reparam_ok else 'violated'}",
    )
    assert perturb_ok
    assert reparam_ok


def test_criterion_9_oracle_equivalences():
    """Tuple counting vs direct enumeration; sampled point probabilities vs
    uniformization at 4 sigma; importance sampling vs vanilla at 3 sigma."""
    t0 = time.time()
    # (a) tuple counts against labeled-particle enumeration
    rng = np.random.default_rng(77)
    count_ok = True
    for _ in range(40):
        d = int(rng.integers(2, 4))
        n = int(rng.integers(2, 9))
        counts = rng.multinomial(n, np.ones(d) / d)
        k = int(rng.integers(1, 4))
        tup = tuple(int(s) for s in rng.integers(1, d + 1, size=k))
        states = []
        for s, c in enumerate(counts, start=1):
            states.extend([s] * c)
        brute = sum(
            1
            for combo in itertools.permutations(range(n), k)
            if all(states[i] == t for i, t in zip(combo, tup))
        )
        if tuple_count(n, tup, LatticePoint(counts, n)) != brute:
            count_ok = False
    # (b) sampled vs exact point probabilities, d = 2, n = 50, 5 points
    cw = builtin_model("curie-weiss", {"beta": 1.0})
    n = 50
    table = finite_n_rates(cw, n)
    start = LatticePoint([25, 25], n)
    dist = exact_transient(table, n, start, 1.0)
    reps = 1_000_000
    finals, _ = batch_final_states(table, n, start.counts, 1.0, stream(5), reps)
    max_z = 0.0
    for target in ([25, 25], [22, 28], [28, 22], [18, 32], [32, 18]):
        p = dist.probability_of(np.array(target))
        emp = float(np.mean(np.all(finals == np.array(target), axis=1)))
        se = math.sqrt(max(p * (1 - p), 1e-15) / reps)
        max_z = max(max_z, abs(emp - p) / se)
    # (c) importance sampling vs vanilla Monte Carlo, 3 sigma
    lim = limit_rates(cw)
    level = 0.7
    opt = minimize_action(
        lim, [0.5, 0.5], [level, 1 - level], 1.0, knots=15, max_iter=80,
        starts=("line",),
    )
    ctrl = build_tilt_control(lim, opt, n)
    event = FinalStateEvent(lambda c, n_: c[:, 0] / n_ >= level)
    vanilla = mc_rate_estimate(lim, event, ns=(n,), reps=100_000, x0=[0.5, 0.5])
    tilted = mc_rate_estimate(
        lim, event, ns=(n,), reps=100_000, control=ctrl, x0=[0.5, 0.5], seed=99
    )
    a, b = vanilla.per_n[0], tilted.per_n[0]
    z_is = abs(a["p_hat"] - b["p_hat"]) / math.hypot(a["stderr"], b["stderr"])
    elapsed = time.time() - t0
    ok = count_ok and max_z <= 4.0 and z_is <= 3.0
    report_line(
        9, ok, 120, elapsed,
        f"tuple counts {'exact' if count_ok else 'WRONG'}, point-prob max "
        f"|z| {max_z:.2f} (4 sigma), IS-vs-vanilla |z| {z_is:.2f} (3 sigma)",
    )
    assert count_ok
    assert max_z <= 4.0
    assert z_is <= 3.0
