"""Named validation experiments: decay-rate measurements against the
minimum-action predictions, LLN convergence at scale, and the closed-form
bound suite.

Each experiment returns a JSON-ready report dict plus tabular rows for the
per-n decay CSV.  The heavy per-n pieces are independent tasks so the CLI
can fan them out over a worker pool.
"""

from __future__ import annotations

import math

import numpy as np

from .ldp import (
    local_rate_primal,
    minimize_action,
    poisson_ell,
    quasipotential,
    superlinearity_bound_check,
)
from .lln import integrate_lln
from .model import (
    ModelError,
    ModelSpec,
    LatticePoint,
    model_from_config,
    model_to_config,
    nearest_lattice_point,
)
from .rates import finite_n_rates, limit_rates
from .simulate import (
    ControlSignal,
    batch_controlled_weights,
    batch_final_states,
    build_tilt_control,
    exact_transient,
    birth_chain_bound,
    excursion_bound,
    stream,
    _extrapolate,
)

EXPERIMENTS = (
    "lln-convergence",
    "ldp-set-event",
    "ldp-point-event",
    "quasipotential-stationary",
    "bounds-suite",
)


def _respec(config):
    return model_from_config(config) if isinstance(config, dict) else config


def _lln_task_star(args):
    return lln_deviation_task(*args)


def _point_task_star(args):
    return point_decay_task(*args)


def _set_task_star(args):
    return set_event_is_task(*args)


def lln_deviation_task(config, n, reps, seed, x0, T=1.0):
    """Sup-norm deviations of ``reps`` replicates from the LLN path."""
    spec = _respec(config)
    table = limit_rates(spec)
    flow = integrate_lln(table, np.asarray(x0, dtype=float), T, dt=1e-3)
    start = nearest_lattice_point(np.asarray(x0, dtype=float), n)
    _, dev = batch_final_states(
        finite_n_rates(spec, n), n, start.counts, T, stream(seed), reps, reference=flow
    )
    return [float(v) for v in dev]


def run_lln_convergence(spec: ModelSpec, n=10_000, reps=100, seed=42, x0=None,
                        tolerance=0.03, pool_map=map):
    """Fraction of replicates whose sup-norm deviation from the LLN flow
    stays within tolerance."""
    if reps <= 0:
        raise ModelError("reps must be positive")
    if x0 is None:
        x0 = np.full(spec.d, 1.0 / spec.d)
    config = model_to_config(spec)
    devs = list(pool_map(_lln_task_star, [(config, n, reps, seed, list(x0))]))[0]
    within = sum(1 for v in devs if v <= tolerance)
    report = {
        "experiment": "lln-convergence",
        "n": int(n),
        "reps": int(reps),
        "tolerance": tolerance,
        "within_tolerance": within,
        "fraction": within / reps,
        "max_deviation": max(devs),
        "median_deviation": float(np.median(devs)),
        "passed": within >= math.ceil(0.95 * reps),
    }
    rows = [{"replicate": i, "deviation": v} for i, v in enumerate(devs)]
    return report, rows


def point_decay_task(config, n, x0, target, t):
    """Exact -(1/n) log P(chain at time t sits at the lattice point nearest
    to target), by uniformization."""
    spec = _respec(config)
    table = finite_n_rates(spec, n)
    start = nearest_lattice_point(np.asarray(x0, dtype=float), n)
    goal = nearest_lattice_point(np.asarray(target, dtype=float), n)
    dist = exact_transient(table, n, start, t)
    p = dist.probability_of(goal)
    return {
        "n": int(n),
        "p_hat": p,
        "stderr": 0.0,
        "decay": (-math.log(p) / n) if p > 0 else math.inf,
        "method": "uniformization",
        "reps": 0,
        "target": [int(c) for c in goal.counts],
    }


def run_ldp_point_event(spec: ModelSpec, x0=(0.5, 0.5), target=(0.3, 0.7),
                        t=0.75, ns=(50, 100, 200, 400), knots=40, max_iter=200,
                        pool_map=map, tolerance=0.05):
    """Exact point-hitting decays vs the minimum-action value."""
    config = model_to_config(spec)
    rows = list(pool_map(
        _point_task_star, [(config, n, list(x0), list(target), t) for n in ns]
    ))
    usable = [(r["n"], r["decay"]) for r in rows if math.isfinite(r["decay"])]
    rate, coef = _extrapolate([u[0] for u in usable], [u[1] for u in usable])
    table = limit_rates(spec)
    action = minimize_action(
        table, np.asarray(x0, float), np.asarray(target, float), t,
        knots=knots, max_iter=max_iter,
    )
    gap = abs(rate - action.value) / max(abs(action.value), 1e-300)
    report = {
        "experiment": "ldp-point-event",
        "x0": list(x0),
        "target": list(target),
        "t": t,
        "per_n": rows,
        "extrapolated_rate": rate,
        "fit_coefficients": list(coef),
        "min_action": action.value,
        "relative_gap": gap,
        "passed": gap <= tolerance,
        "tolerance": tolerance,
    }
    return report, rows


def set_event_control(spec: ModelSpec, x0, level, coordinate=0, t=1.0,
                      knots=40, max_iter=200, candidates=None):
    """Minimum-action value over targets in {x: x_coord >= level} and the
    tilt control toward the minimizer.

    Returns (J, per-target values, ControlSignal builder n -> signal).
    """
    table = limit_rates(spec)
    d = spec.d
    if candidates is None:
        candidates = []
        for lvl in (level, min(level + 0.05, 1.0), min(level + 0.1, 1.0)):
            y = np.full(d, (1.0 - lvl) / (d - 1))
            y[coordinate] = lvl
            candidates.append(y)
    best = None
    per_target = []
    for y in candidates:
        rep = minimize_action(table, np.asarray(x0, float), y, t,
                              knots=knots, max_iter=max_iter)
        per_target.append({"target": [float(v) for v in y], "action": rep.value})
        if best is None or rep.value < best.value:
            best = rep
    return best.value, per_target, best


def set_event_is_task(config, n, x0, level, coordinate, t, reps, seed, breaks, rates):
    """Importance-sampled estimate of P(final coordinate fraction >= level)."""
    spec = _respec(config)
    table = finite_n_rates(spec, n)
    start = nearest_lattice_point(np.asarray(x0, dtype=float), n)
    ctrl = ControlSignal(np.asarray(breaks), np.asarray(rates))
    finals, log_lr, suppressed = batch_controlled_weights(
        table, n, start.counts, ctrl, t, stream(seed, n), reps
    )
    ind = finals[:, coordinate] / n >= level - 1e-12
    w = np.where(ind, np.exp(np.where(ind, log_lr, -np.inf)), 0.0)
    p_hat = float(w.mean())
    stderr = float(w.std(ddof=1) / math.sqrt(reps))
    return {
        "n": int(n),
        "p_hat": p_hat,
        "stderr": stderr,
        "decay": (-math.log(p_hat) / n) if p_hat > 0 else math.inf,
        "method": "importance",
        "reps": int(reps),
        "suppressed": int(suppressed.sum()),
        "hit_fraction": float(ind.mean()),
    }


def run_ldp_set_event(spec: ModelSpec, x0=(0.5, 0.5), level=0.8, coordinate=0,
                      t=1.0, ns=(50, 100, 200, 400), reps=100_000, seed=42,
                      knots=40, max_iter=200, pool_map=map, tolerance=0.2):
    """Importance-sampled set-hitting decays vs the minimum action over
    targets inside the set."""
    j_min, per_target, best = set_event_control(
        spec, x0, level, coordinate, t, knots=knots, max_iter=max_iter
    )
    table = limit_rates(spec)
    ctrl = build_tilt_control(table, best, max(ns))
    config = model_to_config(spec)
    rows = list(pool_map(
        _set_task_star,
        [
            (config, n, list(x0), level, coordinate, t, reps, seed,
             ctrl.breaks.tolist(), ctrl.rates.tolist())
            for n in ns
        ],
    ))
    usable = [(r["n"], r["decay"]) for r in rows if math.isfinite(r["decay"])]
    rate, coef = _extrapolate([u[0] for u in usable], [u[1] for u in usable])
    gap = abs(rate - j_min) / max(abs(j_min), 1e-300)
    report = {
        "experiment": "ldp-set-event",
        "x0": list(x0),
        "level": level,
        "coordinate": coordinate,
        "t": t,
        "per_n": rows,
        "per_target": per_target,
        "extrapolated_rate": rate,
        "fit_coefficients": list(coef),
        "min_action": j_min,
        "relative_gap": gap,
        "passed": gap <= tolerance,
        "tolerance": tolerance,
    }
    return report, rows


def run_quasipotential_stationary(spec: ModelSpec, n=60, horizon=200.0, seed=42,
                                  probes=3, knots=20, max_iter=100):
    """Quasipotential values from the LLN fixed point against long-run
    occupation frequencies of a single long trajectory."""
    table = limit_rates(spec)
    flow = integrate_lln(table, np.full(spec.d, 1.0 / spec.d), 40.0, dt=1e-3)
    xstar = flow.states[-1]
    ftab = finite_n_rates(spec, n)
    start = nearest_lattice_point(xstar, n)
    rng = stream(seed)
    from .simulate import gillespie_run

    sample = gillespie_run(ftab, n, start, horizon, rng)
    ts = np.append(sample.times, horizon)
    holds = np.diff(np.concatenate([[0.0], ts]))
    occupancy: dict = {}
    for state, dt in zip(sample.counts, holds):
        occupancy[tuple(state)] = occupancy.get(tuple(state), 0.0) + dt
    total = sum(occupancy.values())
    ranked = sorted(occupancy.items(), key=lambda kv: -kv[1])
    probes_list = []
    step = max(1, len(ranked) // (probes + 1))
    for counts, hold in ranked[::step][:probes]:
        y = np.asarray(counts, dtype=float) / n
        value, _, _ = quasipotential(
            table, xstar, y, horizons=(0.5, 1.0, 2.0),
            knots=knots, max_iter=max_iter, starts=("line", "perturb-1e-2"),
        )
        pi_hat = hold / total
        probes_list.append({
            "y": [float(v) for v in y],
            "occupation": pi_hat,
            "empirical_decay": -math.log(pi_hat) / n if pi_hat > 0 else math.inf,
            "quasipotential": value,
        })
    report = {
        "experiment": "quasipotential-stationary",
        "fixed_point": [float(v) for v in xstar],
        "n": int(n),
        "horizon": horizon,
        "probes": probes_list,
        "passed": all(math.isfinite(p["quasipotential"]) for p in probes_list),
    }
    rows = [
        {"n": n, "decay": p["empirical_decay"], "quasipotential": p["quasipotential"]}
        for p in probes_list
    ]
    return report, rows


def birth_chain_check(seed, trials=20):
    """Compare the closed-form chain bound with the exact probability of an
    n = 1 single-particle chain computed by uniformization."""
    from .expr import parse_rate_expr
    from .model import StateSpace, TupleTransition

    rng = stream(seed, 999)
    rows = []
    for trial in range(trials):
        N = int(rng.integers(2, 5))
        b = rng.uniform(0.3, 2.0, size=N)
        extra = rng.uniform(0.0, 0.5, size=N)
        t = float(rng.uniform(0.2, 1.5))
        d = N + 1
        transitions = []
        for i in range(N):
            transitions.append(
                TupleTransition((i + 1,), (i + 2,), parse_rate_expr(repr(float(b[i]))))
            )
            if extra[i] > 0.05 and i > 0:
                transitions.append(
                    TupleTransition((i + 1,), (i,), parse_rate_expr(repr(float(extra[i]))))
                )
        spec = ModelSpec(StateSpace(d), tuple(transitions), name=f"chain-{trial}")
        table = finite_n_rates(spec, 1)
        c = float(max(b[i] + (extra[i] if i > 0 else 0.0) for i in range(N)))
        bound = birth_chain_bound(b, c, t)
        start = LatticePoint([1] + [0] * N, 1)
        dist = exact_transient(table, 1, start, t)
        exact = dist.probability_of(np.array([0] * N + [1]))
        rows.append({
            "trial": trial,
            "N": N,
            "t": t,
            "bound": bound,
            "exact": exact,
            "ok": exact >= bound - 1e-12,
        })
    return rows


def excursion_check(spec: ModelSpec, n=200, delta=0.2, reps=100_000, seed=42,
                    tau_fractions=(1.0, 0.25)):
    """Empirical excursion frequency against the martingale bound, at the
    precondition boundary and at a shorter horizon where the bound bites."""
    table = limit_rates(spec)
    c1 = table.max_direction_norm()
    c2 = table.rate_bound() * table.nv * c1
    tau_max = delta / (2.0 * math.sqrt(spec.d) * c2)
    ftab = finite_n_rates(spec, n)
    start = nearest_lattice_point(np.full(spec.d, 1.0 / spec.d), n)

    class _Frozen:
        def at(self, t):
            t = np.atleast_1d(t)
            out = np.repeat((start.counts / n)[None, :], len(t), axis=0)
            return out if len(t) > 1 else out[0]

    rows = []
    for i, frac in enumerate(tau_fractions):
        tau = tau_max * frac
        bound = excursion_bound(table, n, delta, tau)
        _, dev = batch_final_states(
            ftab, n, start.counts, tau, stream(seed, 7 + i), reps,
            reference=_Frozen(), ref_norm="euclid",
        )
        freq = float(np.mean(np.asarray(dev) >= delta))
        rows.append({
            "tau": tau,
            "delta": delta,
            "n": n,
            "reps": reps,
            "bound": bound,
            "empirical": freq,
            "ok": freq <= bound + 1e-12,
        })
    out = dict(rows[0])
    out["ok"] = all(r["ok"] for r in rows)
    out["rows"] = rows
    return out


def superlinearity_grid_check(spec: ModelSpec, norms=(10.0, 100.0, 1000.0), seed=42):
    """Explicit superlinear lower bound on a 10 x 10 (state, direction) grid."""
    table = limit_rates(spec)
    rng = stream(seed, 5)
    expo = rng.exponential(size=(10, spec.d))
    xs = expo / expo.sum(axis=1, keepdims=True)
    dirs = rng.normal(size=(10, spec.d))
    dirs -= dirs.mean(axis=1, keepdims=True)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rows = []
    for norm in norms:
        for i in range(len(xs)):
            for j in range(len(dirs)):
                ok = superlinearity_bound_check(table, xs[i], norm * dirs[j])
                rows.append({"norm": norm, "x": i, "direction": j, "ok": bool(ok)})
    return rows


def lemma44_check(spec: ModelSpec, samples=50, seed=42):
    """r ell(q/r) + r (e - 1) >= q at the flows of converged primal solves."""
    table = limit_rates(spec)
    rng = stream(seed, 11)
    expo = rng.exponential(size=(samples, spec.d))
    xs = 0.9 * expo / expo.sum(axis=1, keepdims=True) + 0.1 / spec.d
    rows = []
    for i in range(samples):
        beta = rng.normal(size=spec.d)
        beta -= beta.mean()
        beta *= 0.3
        res = local_rate_primal(table, xs[i], beta)
        if res.status != "converged":
            continue
        lam = table.limit_rates_at(xs[i])
        ok = True
        for q, r in zip(res.q, lam):
            if r > 0 and r * poisson_ell(q / r) + r * (math.e - 1.0) < q - 1e-9:
                ok = False
        rows.append({"index": i, "ok": ok})
    return rows


def run_bounds_suite(spec: ModelSpec, seed=42, reps=100_000, pool_map=map):
    """Pass/fail rows for the chain bound, the excursion bound, the
    superlinear growth bound, and the flow inequality."""
    chain_rows = birth_chain_check(seed)
    excursion = excursion_check(spec, reps=reps, seed=seed)
    super_rows = superlinearity_grid_check(spec, seed=seed)
    l44_rows = lemma44_check(spec, seed=seed)
    passed = (
        all(r["ok"] for r in chain_rows)
        and excursion["ok"]
        and all(r["ok"] for r in super_rows)
        and all(r["ok"] for r in l44_rows)
    )
    report = {
        "experiment": "bounds-suite",
        "birth_chain": chain_rows,
        "excursion": excursion,
        "superlinearity": super_rows,
        "flow_inequality": l44_rows,
        "passed": passed,
    }
    rows = (
        [{"check": "birth-chain", "index": r["trial"], "ok": r["ok"]} for r in chain_rows]
        + [{"check": "excursion", "index": 0, "ok": excursion["ok"]}]
        + [{"check": "superlinearity", "index": i, "ok": r["ok"]}
           for i, r in enumerate(super_rows)]
        + [{"check": "flow-inequality", "index": i, "ok": r["ok"]}
           for i, r in enumerate(l44_rows)]
    )
    return report, rows


def run_experiment(name, spec, pool_map=map, seed=42, **kwargs):
    if name == "lln-convergence":
        return run_lln_convergence(spec, seed=seed, pool_map=pool_map, **kwargs)
    if name == "ldp-point-event":
        return run_ldp_point_event(spec, pool_map=pool_map, **kwargs)
    if name == "ldp-set-event":
        return run_ldp_set_event(spec, seed=seed, pool_map=pool_map, **kwargs)
    if name == "quasipotential-stationary":
        return run_quasipotential_stationary(spec, seed=seed, **kwargs)
    if name == "bounds-suite":
        return run_bounds_suite(spec, seed=seed, pool_map=pool_map, **kwargs)
    raise ModelError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
