"""Law-of-large-numbers flow of the empirical measure.

The limit dynamics are the nonlinear ODE mu' = sum_v v * lam_v(mu) on the
simplex.  Integration is fixed-step RK4 with a per-step renormalization that
clamps tiny negative coordinates and rescales to unit mass; the exact flow
preserves the simplex, so the projection only corrects roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelError, SimplexPoint
from .rates import JumpRateTable

__all__ = ["LlnTrajectory", "drift", "integrate_lln", "interiority_check"]


@dataclass(frozen=True, eq=False)
class LlnTrajectory:
    """Integrated LLN path: time grid, simplex states, clamp diagnostics."""

    times: np.ndarray
    states: np.ndarray  # shape (len(times), d)
    table: JumpRateTable
    clamp_count: int = 0

    @property
    def d(self):
        return self.states.shape[1]

    def at(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, self.d))
        for j in range(self.d):
            out[:, j] = np.interp(t, self.times, self.states[:, j])
        return out if t.size > 1 else out[0]

    def end(self):
        return SimplexPoint(self.states[-1])


def drift(table: JumpRateTable, x) -> np.ndarray:
    """Velocity field sum_v v lam_v(x); components sum to zero."""
    coords = np.asarray(getattr(x, "coords", x), dtype=float)
    lam = table.limit_rates_batch(coords)
    return lam @ table.direction_matrix()


def _drift_batch(table, X):
    return table.limit_rates_batch(X) @ table.direction_matrix()


def _project(y):
    clamped = int(np.sum(y < 0))
    y = np.maximum(y, 0.0)
    s = y.sum()
    if s <= 0:
        raise ModelError("state collapsed to zero mass during integration")
    return y / s, clamped


def integrate_lln(table: JumpRateTable, x0, T: float, dt: float = 1e-3) -> LlnTrajectory:
    """Classical RK4 on the drift with per-step renormalization.

    Knots are written at every multiple of dt and at T.
    """
    if T <= 0 or dt <= 0:
        raise ModelError("need T > 0 and dt > 0")
    V = table.direction_matrix()

    def f(y):
        vel = table.limit_rates_batch(y) @ V
        if not np.all(np.isfinite(vel)):
            raise ModelError(f"non-finite drift at {y}")
        return vel

    steps = int(np.ceil(T / dt - 1e-12))
    times = np.empty(steps + 1)
    states = np.empty((steps + 1, table.d))
    y = np.asarray(getattr(x0, "coords", x0), dtype=float).copy()
    y, _ = _project(y)
    times[0], states[0] = 0.0, y
    clamps = 0
    t = 0.0
    for m in range(steps):
        h = min(dt, T - t)
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        y, c = _project(y)
        clamps += c
        t = min(t + h, T)
        times[m + 1], states[m + 1] = t, y
    return LlnTrajectory(times, states, table, clamps)


def interiority_check(table: JumpRateTable, samples=(), T: float = 1.0, dt: float = 1e-3):
    """Integrate from each start (plus all vertices) and check the flow
    enters the interior.

    Requires the model to pass the K-ergodicity, uniform-positivity, and
    simultaneous-jump checks (the flow need not enter the interior without
    them).  For each start, fits the largest (b, D) with integer D <= K**d
    such that min_i mu_i(t) >= b * t**D on the time grid, and flags any
    coordinate that is not strictly positive at t in {0.01, 0.1, 1} (scaled
    by T).  Returns (fits, findings).
    """
    from .structure import check_simjumps, check_ue, is_k_ergodic

    failed = []
    if not is_k_ergodic(table.spec)[0]:
        failed.append("k-ergodicity")
    if not check_ue(table.spec)[0]:
        failed.append("uniform positivity")
    if not check_simjumps(table.spec)[0]:
        failed.append("simultaneous-jump restriction")
    if failed:
        raise ModelError(f"interiority preconditions failed: {', '.join(failed)}")
    d = table.d
    starts = [np.eye(d)[i] for i in range(d)]
    starts.extend(np.asarray(getattr(s, "coords", s), dtype=float) for s in samples)
    checkpoints = [0.01 * T, 0.1 * T, T]
    d_cap = min(table.spec.K ** d, 64)
    fits = []
    findings = []
    for start in starts:
        traj = integrate_lln(table, start, T, dt)
        mins = traj.states.min(axis=1)
        for tc in checkpoints:
            value = float(np.min(traj.at(tc)))
            if value <= 0.0:
                findings.append(
                    (tuple(start), tc, value)
                )
        # fitted exponent: smallest D whose b stays bounded away from zero
        mask = traj.times > 0
        tt = traj.times[mask]
        mm = mins[mask]
        best = None
        for D in range(0, d_cap + 1):
            b = float(np.min(mm / tt ** D))
            if b > 0 and (best is None or b > best[0]):
                best = (b, D)
            if b > 1e-4:
                best = (b, D)
                break
        fits.append({"start": tuple(start), "b": best[0], "D": best[1]})
    return fits, findings
