"""Command-line interface: model loading, subcommand dispatch, deterministic
report emission, and figure rendering for the validation experiments.

Exit codes: 0 success, 1 domain error, 2 usage error.  Every subcommand
honors --seed, and reports embed the resolved configuration, so repeated
invocations are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import experiments
from .ldp import (
    local_rate,
    minimize_action,
    path_action,
    quasipotential,
)
from .lln import integrate_lln
from .model import (
    ModelError,
    PiecewiseLinearPath,
    builtin_model,
    load_model_file,
    model_to_config,
    nearest_lattice_point,
    validate_model,
)
from .rates import finite_n_rates, limit_rates
from .simulate import gillespie_run, stream
from .structure import (
    check_simjumps,
    check_single_ergodic,
    check_ue,
    is_k_ergodic,
)

__all__ = ["main", "dispatch", "emit", "run_validate_experiment"]


# --- deterministic serialization ---------------------------------------------------


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    if x == int(x) and abs(x) < 1e16:
        return format(x, ".1f")
    return format(x, ".17g")


def _dumps(obj) -> str:
    """JSON with sorted keys and floats at 17 significant digits."""
    if isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        body = ", ".join(f"{json.dumps(str(k))}: {_dumps(v)}" for k, v in items)
        return "{" + body + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dumps(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    if isinstance(obj, np.ndarray):
        return _dumps(obj.tolist())
    return json.dumps(str(obj))


def _csv_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v)).strip('"')
    return str(v)


def emit(report, format: str, path) -> None:
    """Write a report deterministically: sorted keys, floats with 17
    significant digits, newline-terminated."""
    if format == "json":
        text = _dumps(report) + "\n"
    elif format == "csv":
        rows = report if isinstance(report, list) else [report]
        header = sorted({k for row in rows for k in row})
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(_csv_cell(row.get(k, "")) for k in header))
        text = "\n".join(lines) + "\n"
    else:
        raise ModelError(f"unknown format {format!r}")
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _write_path_csv(path_obj: PiecewiseLinearPath, out):
    rows = [
        dict({"t": float(t)}, **{f"x{j + 1}": float(v) for j, v in enumerate(k)})
        for t, k in zip(path_obj.times, path_obj.knots)
    ]
    header = ["t"] + [f"x{j + 1}" for j in range(path_obj.d)]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(row[h]) for h in header))
    text = "\n".join(lines) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _read_path_csv(path) -> PiecewiseLinearPath:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "t":
            raise ModelError("path file must have header t,x1,...,xd")
        rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
    data = np.asarray(rows)
    return PiecewiseLinearPath(data[:, 0], data[:, 1:])


# --- model and argument plumbing ---------------------------------------------------


def _parse_params(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ModelError(f"--param expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _resolved_format(args):
    if args.format:
        return args.format
    out = getattr(args, "out", None)
    return "csv" if out and str(out).endswith(".csv") else "json"


def _resolve_model(args):
    if getattr(args, "model_file", None):
        if getattr(args, "model", None):
            raise ModelError("give either --model or --model-file, not both")
        return load_model_file(args.model_file)
    if not getattr(args, "model", None):
        raise ModelError("a model is required (--model or --model-file)")
    return builtin_model(args.model, _parse_params(getattr(args, "param", None)))


def _parse_point(text, d=None):
    vals = np.asarray([float(v) for v in text.split(",")], dtype=float)
    if d is not None and len(vals) != d:
        raise ModelError(f"expected {d} coordinates, got {len(vals)}")
    if vals.min() < -1e-9:
        raise ModelError(f"negative coordinate {vals.min()}")
    s = vals.sum()
    if abs(s - 1.0) > 1e-9:
        raise ModelError(f"coordinates sum to {s}, not 1")
    return np.maximum(vals, 0.0) / s


def _pool_map(jobs):
    if jobs <= 1:
        return map

    def mapper(fn, it):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, it))

    return mapper


def _add_common(p, model=True):
    if model:
        p.add_argument("--model", help="built-in model name")
        p.add_argument("--model-file", help="JSON model config file")
        p.add_argument("--param", action="append", help="model parameter key=value")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument(
        "--format", choices=("csv", "json"),
        help="output format (default: by --out extension, else json)",
    )
    p.add_argument(
        "--jobs",
        type=int,
        default=int(os.environ.get("MFLDP_JOBS", os.cpu_count() or 1)),
        help="worker pool size (env MFLDP_JOBS)",
    )


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mfldp",
        description="Mean-field particle systems: simulation, LLN, and "
        "sample-path large deviations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample one empirical-measure trajectory")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--x0", required=True, help="comma-separated start point")
    p.add_argument("--t", type=float, default=1.0)

    p = sub.add_parser("lln", help="integrate the LLN flow")
    _add_common(p)
    p.add_argument("--x0", required=True)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)

    p = sub.add_parser("rate", help="evaluate the local rate function")
    _add_common(p)
    p.add_argument("--x", required=True)
    p.add_argument("--beta-vec", required=True, help="zero-sum velocity")

    p = sub.add_parser("action", help="action of a piecewise-linear path")
    _add_common(p)
    p.add_argument("--path-file", required=True, help="CSV with header t,x1..xd")

    p = sub.add_parser("minimize", help="minimum-action path between two points")
    _add_common(p)
    p.add_argument("--x0", required=True)
    p.add_argument("--xt", required=True)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--knots", type=int, default=50)
    p.add_argument("--max-iter", type=int, default=250)
    p.add_argument("--path-out", help="write the optimized path CSV here")

    p = sub.add_parser("quasipotential", help="minimal action over all horizons")
    _add_common(p)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--horizons", default="0.25,0.5,1,2,4,8")
    p.add_argument("--knots", type=int, default=50)
    p.add_argument("--max-iter", type=int, default=250)

    p = sub.add_parser("check", help="structural assumption checks")
    _add_common(p)
    p.add_argument("--strict", action="store_true",
                   help="exit 1 when any assumption fails")

    p = sub.add_parser("validate", help="run a named validation experiment")
    _add_common(p)
    p.add_argument("--experiment", required=True, choices=experiments.EXPERIMENTS)
    p.add_argument("--reps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--ns", help="comma-separated populations")
    p.add_argument("--x0")
    p.add_argument("--target")
    p.add_argument("--t", type=float)
    p.add_argument("--level", type=float)
    p.add_argument("--knots", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--force", action="store_true",
                   help="run even if structure checks fail")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering PNG figures next to the report")
    return parser


# --- subcommand implementations -----------------------------------------------------


def _cmd_simulate(args):
    spec = _resolve_model(args)
    x0 = _parse_point(args.x0, spec.d)
    table = finite_n_rates(spec, args.n)
    start = nearest_lattice_point(x0, args.n)
    sample = gillespie_run(table, args.n, start, args.t, stream(args.seed))
    rows = []
    state0 = start.counts / args.n
    rows.append(dict({"t": 0.0, "direction": -1},
                     **{f"x{j + 1}": float(v) for j, v in enumerate(state0)}))
    for t, j, c in zip(sample.times, sample.directions, sample.counts[1:]):
        rows.append(dict({"t": float(t), "direction": int(j)},
                         **{f"x{i + 1}": float(v) for i, v in enumerate(c / args.n)}))
    if _resolved_format(args) == "json":
        emit({"config": _provenance(args, spec), "trajectory": rows}, "json", args.out)
    else:
        emit(rows, "csv", args.out)
    return 0


def _cmd_lln(args):
    spec = _resolve_model(args)
    x0 = _parse_point(args.x0, spec.d)
    table = limit_rates(spec)
    flow = integrate_lln(table, x0, args.t, args.dt)
    rows = [
        dict({"t": float(t)}, **{f"x{j + 1}": float(v) for j, v in enumerate(state)})
        for t, state in zip(flow.times, flow.states)
    ]
    if _resolved_format(args) == "json":
        emit({"config": _provenance(args, spec), "trajectory": rows}, "json", args.out)
    else:
        emit(rows, "csv", args.out)
    return 0


def _cmd_rate(args):
    spec = _resolve_model(args)
    x = _parse_point(args.x, spec.d)
    beta = np.asarray([float(v) for v in args.beta_vec.split(",")])
    table = limit_rates(spec)
    res = local_rate(table, x, beta)
    emit(
        {
            "config": _provenance(args, spec),
            "value": res.value,
            "theta": res.theta.tolist(),
            "q": res.q.tolist(),
            "iterations": res.iterations,
            "grad_norm": res.grad_norm,
            "status": res.status,
        },
        "json",
        args.out,
    )
    return 0


def _cmd_action(args):
    spec = _resolve_model(args)
    path = _read_path_csv(args.path_file)
    table = limit_rates(spec)
    report = path_action(table, path)
    emit(
        {
            "config": _provenance(args, spec),
            "value": report.value,
            "segments": report.segment_values.tolist(),
            "scheme": report.scheme,
        },
        "json",
        args.out,
    )
    return 0


def _cmd_minimize(args):
    spec = _resolve_model(args)
    x0 = _parse_point(args.x0, spec.d)
    xt = _parse_point(args.xt, spec.d)
    table = limit_rates(spec)
    report = minimize_action(table, x0, xt, args.t, knots=args.knots,
                             max_iter=args.max_iter)
    if args.path_out:
        _write_path_csv(report.path, args.path_out)
    emit(
        {
            "config": _provenance(args, spec),
            "value": report.value,
            "diagnostics": report.diagnostics,
        },
        "json",
        args.out,
    )
    return 0


def _cmd_quasipotential(args):
    spec = _resolve_model(args)
    x = _parse_point(args.x, spec.d)
    y = _parse_point(args.y, spec.d)
    table = limit_rates(spec)
    horizons = tuple(float(h) for h in args.horizons.split(","))
    value, best, per = quasipotential(table, x, y, horizons=horizons,
                                      knots=args.knots, max_iter=args.max_iter)
    emit(
        {
            "config": _provenance(args, spec),
            "value": value,
            "per_horizon": {str(k): v for k, v in per.items()},
        },
        "json",
        args.out,
    )
    return 0


def _cmd_check(args):
    spec = _resolve_model(args)
    kerg, closures = is_k_ergodic(spec)
    g1_ok, g1_counter = check_single_ergodic(spec, "gamma1")
    g2_ok, g2_counter = check_single_ergodic(spec, "geff")
    ue_ok, ue_findings = check_ue(spec)
    sj_ok, sj_diag = check_simjumps(spec)
    model_findings = validate_model(spec)
    report = {
        "config": _provenance(args, spec),
        "model_findings": [str(f) for f in model_findings],
        "k_ergodic": kerg,
        "closures": {str(u): c.states() for u, c in closures.items()},
        "g1": {"ok": g1_ok, "counterexample": g1_counter},
        "g2": {"ok": g2_ok, "counterexample": g2_counter},
        "ue": {"ok": ue_ok, "mixed_transitions": ue_findings},
        "simjumps": {
            "ok": sj_ok,
            "directions": {str(k): {"property1": v["property1"],
                                    "property2": v["property2"]}
                           for k, v in sj_diag.items()},
        },
    }
    emit(report, "json", args.out)
    if args.strict and not (kerg and ue_ok and sj_ok and not model_findings):
        return 1
    return 0


def run_validate_experiment(args, spec):
    """Execute a named experiment; returns (report, per-n rows)."""
    kwargs = {}
    if args.experiment == "lln-convergence":
        if args.reps is not None and args.reps <= 0:
            raise UsageError("lln-convergence needs reps > 0")
        if args.reps:
            kwargs["reps"] = args.reps
        if args.n:
            kwargs["n"] = args.n
        if args.x0:
            kwargs["x0"] = _parse_point(args.x0, spec.d)
    elif args.experiment in ("ldp-point-event", "ldp-set-event"):
        if args.ns:
            kwargs["ns"] = tuple(int(v) for v in args.ns.split(","))
        if args.x0:
            kwargs["x0"] = tuple(_parse_point(args.x0, spec.d))
        if args.t:
            kwargs["t"] = args.t
        if args.knots:
            kwargs["knots"] = args.knots
        if args.max_iter:
            kwargs["max_iter"] = args.max_iter
        if args.experiment == "ldp-point-event" and args.target:
            kwargs["target"] = tuple(_parse_point(args.target, spec.d))
        if args.experiment == "ldp-set-event":
            if args.level:
                kwargs["level"] = args.level
            if args.reps:
                kwargs["reps"] = args.reps
    elif args.experiment == "quasipotential-stationary":
        if args.n:
            kwargs["n"] = args.n
    elif args.experiment == "bounds-suite":
        if args.reps:
            kwargs["reps"] = args.reps
    if not args.force:
        kerg, _ = is_k_ergodic(spec)
        ue_ok, _ = check_ue(spec)
        if not (kerg and ue_ok):
            raise ModelError(
                "model fails structure checks (run `check`); use --force to override"
            )
    return experiments.run_experiment(
        args.experiment, spec, pool_map=_pool_map(args.jobs), seed=args.seed, **kwargs
    )


def _render_figures(args, report, rows, base):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    name = report.get("experiment")
    if name in ("ldp-point-event", "ldp-set-event"):
        ns = [r["n"] for r in rows if math.isfinite(r.get("decay", math.inf))]
        decays = [r["decay"] for r in rows if math.isfinite(r.get("decay", math.inf))]
        ax.plot([1.0 / n for n in ns], decays, "o-", label="measured decay")
        ax.axhline(report["min_action"], color="k", ls="--", label="minimum action")
        ax.axhline(report["extrapolated_rate"], color="C3", ls=":",
                   label="extrapolated")
        ax.set_xlabel("1/n")
        ax.set_ylabel("-(1/n) log p")
        ax.legend()
    elif name == "lln-convergence":
        devs = [r["deviation"] for r in rows]
        ax.hist(devs, bins=30)
        ax.axvline(report["tolerance"], color="k", ls="--")
        ax.set_xlabel("sup-norm deviation from the LLN path")
        ax.set_ylabel("replicates")
    elif name == "bounds-suite":
        oks = [1.0 if r["ok"] else 0.0 for r in rows]
        ax.bar(range(len(oks)), oks)
        ax.set_xlabel("check index")
        ax.set_ylabel("pass")
    else:
        probes = report.get("probes", [])
        if probes:
            ax.plot([p["quasipotential"] for p in probes],
                    [p["empirical_decay"] for p in probes], "o")
            ax.set_xlabel("quasipotential")
            ax.set_ylabel("empirical decay")
    ax.set_title(name)
    fig.tight_layout()
    fig.savefig(base + ".png", dpi=120)
    plt.close(fig)


def _cmd_validate(args):
    spec = _resolve_model(args)
    report, rows = run_validate_experiment(args, spec)
    report = {"config": _provenance(args, spec), **report}
    base = args.out or f"{args.experiment}-report.json"
    emit(report, "json", base)
    stem = base[:-5] if base.endswith(".json") else base
    emit(rows, "csv", stem + "-rows.csv")
    if not args.no_figures:
        _render_figures(args, report, rows, stem)
    return 0


def _provenance(args, spec):
    resolved = {
        "command": args.command,
        "seed": args.seed,
        "model": model_to_config(spec),
    }
    for key in ("n", "t", "dt", "knots", "reps", "level", "experiment"):
        if hasattr(args, key) and getattr(args, key) is not None:
            resolved[key] = getattr(args, key)
    return resolved


class UsageError(Exception):
    pass


_COMMANDS = {
    "simulate": _cmd_simulate,
    "lln": _cmd_lln,
    "rate": _cmd_rate,
    "action": _cmd_action,
    "minimize": _cmd_minimize,
    "quasipotential": _cmd_quasipotential,
    "check": _cmd_check,
    "validate": _cmd_validate,
}


def dispatch(argv) -> int:
    """Route argv to a subcommand; 0 success, 1 domain error, 2 usage error."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ModelError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
