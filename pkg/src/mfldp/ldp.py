"""Local rate function, path actions, and minimum-action solvers.

The local cost of moving with velocity beta at state x is the entropy
minimization

    L(x, beta) = inf { sum_v lam_v(x) ell(q_v / lam_v(x)) : q >= 0, sum_v v q_v = beta }

with ell the Poisson local rate function; it equals the Legendre transform
of H(x, theta) = sum_v lam_v(x) (exp<theta, v> - 1).  Both routes are
implemented: a damped Newton ascent of the strictly concave dual on the
sum-zero hyperplane (batched over many (x, beta) nodes, which is what makes
the path optimizers affordable), and an independent projected-gradient
primal solver used to cross-check it.  Path actions integrate L along
piecewise-linear paths with a fixed Gauss-Legendre rule, and the
minimum-action solvers run projected gradient descent on interior knots
with finite-difference gradients built from the same quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .lln import integrate_lln
from .model import ModelError, PiecewiseLinearPath
from .rates import JumpRateTable

__all__ = [
    "poisson_ell",
    "hamiltonian",
    "LocalRateResult",
    "local_rate",
    "local_rate_primal",
    "ActionReport",
    "path_action",
    "superlinearity_bound_check",
    "perturb_path",
    "minimize_action",
    "quasipotential",
    "sanov_cost",
    "reparametrization_check",
]

THETA_CAP = 700.0
DIVERGENCE_NORM = 1e3


def poisson_ell(r: float) -> float:
    """r log r - r + 1 for r >= 0 (0 log 0 = 0); +inf for r < 0."""
    if r < 0:
        return math.inf
    if r == 0:
        return 1.0
    return r * math.log(r) - r + 1.0


def _sum_zero_basis(d: int) -> np.ndarray:
    """Orthonormal basis of the zero-sum hyperplane, shape (d, d-1)."""
    q, _ = np.linalg.qr(np.vstack([np.ones(d), np.eye(d)[: d - 1]]).T)
    return q[:, 1:]


_BASIS_CACHE: dict = {}


def _basis(d):
    if d not in _BASIS_CACHE:
        _BASIS_CACHE[d] = _sum_zero_basis(d)
    return _BASIS_CACHE[d]


def hamiltonian(table: JumpRateTable, x, theta, order: int = 0):
    """H(x, theta) = sum_v lam_v(x)(e^{<theta,v>} - 1).

    With order=1 also returns the gradient, with order=2 the Hessian too.
    Exponents are capped at 700 before exponentiation.
    """
    lam = table.limit_rates_at(x)
    V = table.direction_matrix()
    s = np.minimum(V @ np.asarray(theta, dtype=float), THETA_CAP)
    w = lam * np.exp(s)
    value = float(np.sum(w - lam))
    if order == 0:
        return value
    grad = V.T @ w
    if order == 1:
        return value, grad
    hess = V.T @ (w[:, None] * V)
    return value, grad, hess


@dataclass(frozen=True, eq=False)
class LocalRateResult:
    """Outcome of one local-rate solve.

    value is L(x, beta); theta is the dual optimizer (sum fixed to zero);
    q holds the primal flows per table direction.  status is 'converged',
    'infinite' (beta outside the cone of active directions; ascent holds the
    normalized unbounded direction), or 'max-iter'.
    """

    value: float
    theta: np.ndarray
    q: np.ndarray
    iterations: int
    grad_norm: float
    status: str
    ascent: np.ndarray | None = None

    @property
    def finite(self):
        return self.status == "converged"


class _BatchDual:
    """Damped Newton ascent of the dual at many (x, beta) nodes at once.

    Every node runs its own damping and convergence bookkeeping, but the
    linear algebra (exp, einsum, batched solve) is shared, which is what
    path objectives and finite-difference gradients lean on.
    """

    def __init__(self, table, tol=1e-10, max_iter=200):
        self.table = table
        self.V = table.direction_matrix()
        self.B = _basis(table.d)
        self.VB = self.V @ self.B
        self.tol = tol
        self.max_iter = max_iter

    def solve(self, XS, BETAS, theta0=None):
        """Returns (values, thetas, qs, statuses, gnorms, iterations).

        XS: (N, d) simplex points; BETAS: (N, d) zero-sum velocities.
        statuses: 0 converged, 1 infinite, 2 max-iter.
        """
        XS = np.atleast_2d(np.asarray(XS, dtype=float))
        BETAS = np.broadcast_to(
            np.asarray(BETAS, dtype=float), (XS.shape[0], XS.shape[1])
        )
        N, d = XS.shape
        m = d - 1
        lam = self.table.limit_rates_batch(XS)  # (N, nv)
        bb = BETAS @ self.B  # (N, m)
        phi = np.zeros((N, m))
        if theta0 is not None:
            phi = np.atleast_2d(theta0 @ self.B) * np.ones((N, 1))
        eye = np.eye(m)

        def g_of(p):
            s = np.minimum(p @ self.VB.T, THETA_CAP)
            w = lam * np.exp(s)
            return np.einsum("ni,ni->n", p, bb) - np.sum(w - lam, axis=1), w

        g, w = g_of(phi)
        mu = np.full(N, 1e-12)
        status = np.full(N, 2, dtype=np.int8)  # 2 = still running / max-iter
        gnorm = np.full(N, np.inf)
        iters = np.zeros(N, dtype=int)
        gtol = self.tol * (1.0 + np.linalg.norm(BETAS, axis=1))
        live = np.ones(N, dtype=bool)
        for it in range(self.max_iter):
            grad = bb - w @ self.VB  # (N, m)
            gn = np.linalg.norm(grad, axis=1)
            gnorm = np.where(live, gn, gnorm)
            newly = live & (gn <= gtol)
            status[newly] = 0
            live &= ~newly
            if not live.any():
                break
            idx = np.nonzero(live)[0]
            iters[idx] += 1
            hess = np.einsum("nv,vi,vj->nij", w[idx], self.VB, self.VB)
            scale = np.trace(hess, axis1=1, axis2=2) / m
            pend = np.ones(idx.size, dtype=bool)
            for _ in range(60):
                if not pend.any():
                    break
                sub = idx[pend]
                # damping blends Newton into plain gradient ascent as it grows
                reg = mu[sub] * (scale[pend] + 1.0)
                H = hess[pend] + reg[:, None, None] * eye
                try:
                    step = np.linalg.solve(H, grad[sub][..., None])[..., 0]
                except np.linalg.LinAlgError:
                    mu[sub] = np.minimum(mu[sub] * 10, 1e18)
                    continue
                cand = phi[sub] + step
                g_new, w_new = self._g_rows(cand, lam[sub], bb[sub])
                ok = np.isfinite(g_new) & (g_new > g[sub] - 1e-18)
                acc = sub[ok]
                phi[acc] = cand[ok]
                g[acc] = g_new[ok]
                w[acc] = w_new[ok]
                mu[acc] = np.maximum(mu[acc] / 3, 1e-14)
                rej = sub[~ok]
                mu[rej] = np.minimum(mu[rej] * 10, 1e18)
                remaining = np.zeros(idx.size, dtype=bool)
                remaining[np.isin(idx, rej)] = True
                pend = remaining
            stuck = live.copy()
            stuck[idx] &= mu[idx] >= 1e18
            live &= ~stuck
            diverged = live & (np.linalg.norm(phi, axis=1) > DIVERGENCE_NORM)
            status[diverged] = 1
            live &= ~diverged
            if not live.any():
                break
        # nodes stalled at float resolution still satisfy the first-order
        # condition far below the 1e-8 contract; count them as converged
        undecided = status == 2
        if undecided.any():
            grad = bb - w @ self.VB
            gn = np.linalg.norm(grad, axis=1)
            gnorm = np.where(undecided, gn, gnorm)
            ok = undecided & (gnorm <= 1e-8 * (1.0 + np.linalg.norm(BETAS, axis=1)))
            status[ok] = 0
        values = np.where(status == 1, np.inf, np.maximum(g, 0.0))
        thetas = phi @ self.B.T
        qs = w
        return values, thetas, qs, status, gnorm, iters

    def _g_rows(self, p, lam, bb):
        s = np.minimum(p @ self.VB.T, THETA_CAP)
        w = lam * np.exp(s)
        return np.einsum("ni,ni->n", p, bb) - np.sum(w - lam, axis=1), w


def local_rate(
    table: JumpRateTable,
    x,
    beta,
    tol: float = 1e-10,
    max_iter: int = 200,
    theta0=None,
) -> LocalRateResult:
    """Evaluate L(x, beta) by damped Newton ascent of the concave dual.

    beta must have components summing to zero (within 1e-10 relative).
    Divergence of the ascent (theta norm beyond 1e3 with the objective still
    increasing) classifies the value as +inf and reports the escape
    direction.
    """
    beta = np.asarray(beta, dtype=float)
    if abs(float(beta.sum())) > 1e-10 * max(1.0, float(np.abs(beta).max())):
        raise ModelError(f"velocity components sum to {beta.sum()}, not 0")
    coords = np.asarray(getattr(x, "coords", x), dtype=float)
    engine = _BatchDual(table, tol=tol, max_iter=max_iter)
    values, thetas, qs, status, gnorms, iters = engine.solve(
        coords[None, :], beta[None, :], theta0=theta0
    )
    code = {0: "converged", 1: "infinite", 2: "max-iter"}[int(status[0])]
    ascent = None
    if code == "infinite":
        ascent = thetas[0] / max(np.linalg.norm(thetas[0]), 1e-300)
    q = qs[0] if code != "infinite" else np.zeros(table.nv)
    return LocalRateResult(
        float(values[0]), thetas[0], q, int(iters[0]), float(gnorms[0]), code, ascent
    )


# --- independent primal route ---------------------------------------------------


def _dykstra(q, A, pinv, b, sweeps=60):
    """Projection onto {A q = b} intersect {q >= 0} by Dykstra alternation."""
    p = np.zeros_like(q)
    y = q
    for _ in range(sweeps):
        u = y - pinv @ (A @ y - b)
        w = u + p
        y_new = np.maximum(w, 0.0)
        p = w - y_new
        if np.abs(A @ y_new - b).max() < 1e-13 and np.min(y_new) >= -1e-15:
            return np.maximum(y_new, 0.0)
        y = y_new
    return np.maximum(y, 0.0)


def local_rate_primal(table: JumpRateTable, x, beta, max_iter: int = 4000) -> LocalRateResult:
    """Evaluate L(x, beta) by direct minimization over the flows q.

    Accelerated projected gradient (backtracking FISTA with restarts) on
    { q >= 0 : sum_v v q_v = beta }, independent of the dual solve.
    Directions with lam_v(x) = 0 are forced to q_v = 0.
    """
    beta = np.asarray(beta, dtype=float)
    lam_all = table.limit_rates_at(x)
    V_all = table.direction_matrix()
    active = lam_all > 0.0
    if not np.any(active):
        if float(np.abs(beta).max()) <= 1e-12:
            return LocalRateResult(
                0.0, np.zeros(table.d), np.zeros(table.nv), 0, 0.0, "converged"
            )
        return LocalRateResult(
            math.inf, np.zeros(table.d), np.zeros(table.nv), 0, math.inf, "infinite",
            ascent=beta / max(np.linalg.norm(beta), 1e-300),
        )
    lam = lam_all[active]
    A = V_all[active].T  # d x na
    na = A.shape[1]

    feas = linprog(
        c=np.ones(na), A_eq=A, b_eq=beta, bounds=[(0, None)] * na, method="highs"
    )
    if not feas.success:
        return LocalRateResult(
            math.inf,
            np.zeros(table.d),
            np.zeros(table.nv),
            0,
            math.inf,
            "infinite",
            ascent=beta / max(np.linalg.norm(beta), 1e-300),
        )
    pinv = np.linalg.pinv(A)

    def f(q):
        r = q / lam
        mask = r > 0
        out = np.sum(lam[~mask])
        out += np.sum(lam[mask] * (r[mask] * np.log(r[mask]) - r[mask] + 1.0))
        return float(out)

    def grad(q):
        return np.log(np.maximum(q, 1e-300) / lam)

    # warm start: zero-cost flows corrected back to the constraint set
    q = _dykstra(lam + pinv @ (beta - A @ lam), A, pinv, beta)
    fq = f(q)
    q_prev = q.copy()
    t_mom = 1.0
    L_est = max(float(np.max(1.0 / np.maximum(q, 1e-6))), 1.0)
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        # value-safeguarded momentum proposal, projected back to the set
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        base, fb = q, fq
        if it > 1:
            y = _dykstra(q + ((t_mom - 1.0) / t_new) * (q - q_prev), A, pinv, beta)
            fy = f(y)
            if fy < fb:
                base, fb = y, fy
        t_mom = t_new
        g = grad(base)
        cand, fc = base, fb
        for _ in range(60):
            cand = _dykstra(base - g / L_est, A, pinv, beta)
            fc = f(cand)
            gap = cand - base
            if fc <= fb + float(g @ gap) + 0.5 * L_est * float(gap @ gap) + 1e-15:
                break
            L_est *= 2.0
        q_prev = q
        if fc < fq:
            q, fq = cand, fc
            stall = 0
        else:
            stall += 1
            if stall > 40:
                break
        L_est = max(L_est / 1.5, 1e-8)
    qfull = np.zeros(table.nv)
    qfull[active] = q
    resid = float(np.abs(A @ q - beta).max())
    # stationarity of the projected-gradient map, scaled to the value
    probe = _dykstra(q - grad(q) / max(L_est, 1.0), A, pinv, beta)
    pg_resid = float(np.linalg.norm(probe - q)) * max(L_est, 1.0)
    stationary = pg_resid <= 1e-5 * max(1.0, abs(fq))
    return LocalRateResult(
        fq, np.zeros(table.d), qfull, it, resid,
        "converged" if (resid < 1e-8 and stationary) else "max-iter",
    )


# --- path actions ----------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


@dataclass(frozen=True, eq=False)
class ActionReport:
    """Action of a path with per-segment contributions and solver notes."""

    path: PiecewiseLinearPath
    value: float
    segment_values: np.ndarray
    scheme: str = "gauss-legendre-5"
    diagnostics: dict = field(default_factory=dict)

    @property
    def finite(self):
        return math.isfinite(self.value)

    def segment_flows(self, table):
        """Primal flows q_v at each segment midpoint (for control synthesis)."""
        mids = 0.5 * (self.path.knots[:-1] + self.path.knots[1:])
        dt = np.diff(self.path.times)
        betas = np.diff(self.path.knots, axis=0) / dt[:, None]
        engine = _BatchDual(table)
        _, _, qs, status, _, _ = engine.solve(mids, betas)
        if np.any(status == 1):
            raise ModelError("infinite-action segment has no flow decomposition")
        return qs


def _segment_nodes(knots, times):
    """Quadrature nodes and velocities for every segment of a knot array."""
    x0 = knots[:-1]
    x1 = knots[1:]
    dt = np.diff(times)
    betas = (x1 - x0) / dt[:, None]
    nodes = (
        x0[:, None, :] + _GL_NODES[None, :, None] * (x1 - x0)[:, None, :]
    )  # (S, 5, d)
    return nodes, betas, dt


def _segment_values_batch(engine, knots, times):
    """Per-segment quadrature of L for the whole knot array in one solve."""
    S = knots.shape[0] - 1
    nodes, betas, dt = _segment_nodes(knots, times)
    XS = nodes.reshape(S * 5, -1)
    BETAS = np.repeat(betas, 5, axis=0)
    values, _, _, status, _, _ = engine.solve(XS, BETAS)
    values = values.reshape(S, 5)
    out = np.where(
        np.any(~np.isfinite(values) | (status.reshape(S, 5) == 1), axis=1),
        np.inf,
        (values * _GL_WEIGHTS[None, :]).sum(axis=1) * dt,
    )
    return out


def path_action(table: JumpRateTable, path: PiecewiseLinearPath) -> ActionReport:
    """Composite 5-node Gauss-Legendre quadrature of the local rate function."""
    engine = _BatchDual(table)
    values = _segment_values_batch(engine, path.knots, path.times)
    infinite = [int(i) for i in np.nonzero(~np.isfinite(values))[0]]
    total = math.inf if infinite else float(values.sum())
    return ActionReport(
        path, total, values, diagnostics={"infinite_segments": infinite}
    )


def superlinearity_bound_check(table: JumpRateTable, x, beta) -> bool:
    """L(x, beta) >= ||beta|| log||beta|| / max||v|| - R |V| ||beta||.

    R is the grid maximum of the jump rates.  Requires ||beta|| > e.
    """
    beta = np.asarray(beta, dtype=float)
    norm = float(np.linalg.norm(beta))
    if norm <= math.e:
        raise ModelError(f"bound needs ||beta|| > e, got {norm}")
    value = local_rate(table, x, beta).value
    bound = norm * math.log(norm) / table.max_direction_norm() - (
        table.rate_bound() * table.nv * norm
    )
    return value >= bound - 1e-9


def perturb_path(table: JumpRateTable, path: PiecewiseLinearPath, rho: float):
    """Knotwise convex combination with the LLN flow from the same start.

    psi = rho * mu + (1 - rho) * path on the union of the two time grids;
    psi(0) = path(0) because the flow starts there.
    """
    if not 0 <= rho <= 1:
        raise ModelError(f"rho must lie in [0, 1], got {rho}")
    span = path.t1 - path.t0
    flow = integrate_lln(
        table, path.knots[0], span, dt=min(1e-3 * max(span, 1e-9), span / 4)
    )
    times = np.union1d(path.times, flow.times + path.t0)
    gk = path.resample(times).knots
    fk = np.atleast_2d(flow.at(times - path.t0))
    knots = rho * fk + (1 - rho) * gk
    return PiecewiseLinearPath(times, knots)


# --- minimum-action optimization ---------------------------------------------------


def _project_simplex(y):
    """Euclidean projection of each row of y onto the probability simplex."""
    y = np.atleast_2d(y)
    n, d = y.shape
    u = -np.sort(-y, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, d + 1)
    cond = u - css / idx > 0
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1.0)
    return np.maximum(y - theta[:, None], 0.0)


def _fd_gradient(engine, times, knots, seg_values, fd_step):
    """Forward finite differences of the action in the interior knots.

    Each (knot, basis-direction) probe changes two segments only; all probes
    are stacked into a single batched dual solve.
    """
    S = knots.shape[0] - 1
    d = knots.shape[1]
    B = _basis(d)
    m = d - 1
    interior = range(1, S)
    probes_x = []
    probes_b = []
    for i in interior:
        for b in range(m):
            trial = knots.copy()
            trial[i] = knots[i] + fd_step * B[:, b]
            for seg in (i - 1, i):
                x0, x1 = trial[seg], trial[seg + 1]
                dt = times[seg + 1] - times[seg]
                beta = (x1 - x0) / dt
                nodes = x0[None, :] + _GL_NODES[:, None] * (x1 - x0)[None, :]
                probes_x.append(nodes)
                probes_b.append(np.repeat(beta[None, :], 5, axis=0))
    XS = np.concatenate(probes_x, axis=0)
    BETAS = np.concatenate(probes_b, axis=0)
    values, _, _, status, _, _ = engine.solve(XS, BETAS)
    values = values.reshape(-1, 2, 5)  # (probe, segment pair, node)
    grad = np.zeros_like(knots)
    base = seg_values
    p = 0
    for i in interior:
        for b in range(m):
            pair = values[p]
            p += 1
            dts = np.array([times[i] - times[i - 1], times[i + 1] - times[i]])
            segs = (pair * _GL_WEIGHTS[None, :]).sum(axis=1) * dts
            if not np.all(np.isfinite(segs)):
                continue
            delta = segs.sum() - (base[i - 1] + base[i])
            grad[i] += delta / fd_step * B[:, b]
    return grad


def _optimize_knots(table, times, knots, max_iter=250, fd_step=1e-6, rel_tol=1e-7):
    """Projected gradient descent on the interior knots.

    Gradients are forward finite differences built from the same quadrature
    as the objective; knots are projected back onto the simplex after each
    step with Armijo backtracking on the true objective.
    """
    engine = _BatchDual(table)
    knots = np.array(knots, dtype=float)
    seg = _segment_values_batch(engine, knots, times)
    value = math.inf if np.any(~np.isfinite(seg)) else float(seg.sum())
    history = [value]
    step = 0.1
    for it in range(max_iter):
        if not math.isfinite(value):
            break
        grad = _fd_gradient(engine, times, knots, seg, fd_step)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-12:
            break
        improved = False
        for _ in range(25):
            cand = knots.copy()
            cand[1:-1] = _project_simplex(knots[1:-1] - step * grad[1:-1])
            seg_new = _segment_values_batch(engine, cand, times)
            f_new = math.inf if np.any(~np.isfinite(seg_new)) else float(seg_new.sum())
            if f_new < value - 1e-10 * max(1.0, abs(value)):
                knots, seg, value = cand, seg_new, f_new
                step = min(step * 1.6, 10.0)
                improved = True
                break
            step *= 0.5
            if step < 1e-13:
                break
        history.append(value)
        if not improved:
            break
        if len(history) > 12 and history[-12] - value < rel_tol * max(1.0, abs(value)):
            break
    return knots, value, {
        "iterations": len(history) - 1,
        "final_step": step,
        "history_tail": [float(h) for h in history[-3:]],
    }


def _straight_line(x0, xT, times):
    s = (times - times[0]) / (times[-1] - times[0])
    return x0[None, :] + s[:, None] * (xT - x0)[None, :]


def _lln_bridge_start(table, x0, xT, times):
    """Follow the LLN flow, then bridge to the target through the interior."""
    from .structure import build_interior_path, escape_level_cap

    span = times[-1] - times[0]
    switch = times[0] + 0.7 * span
    flow = integrate_lln(table, x0, 0.7 * span, dt=max(span / 700, 1e-3))
    mid = flow.states[-1]
    a = min(float(mid.min()), float(xT.min()), escape_level_cap(table.spec))
    if a <= 1e-9:
        return None
    try:
        bridge = build_interior_path(table.spec, mid, xT, a)
    except ModelError:
        return None
    knots = np.empty((len(times), len(x0)))
    span_b = bridge.path.times[-1] - bridge.path.times[0]
    for i, t in enumerate(times):
        if t <= switch:
            knots[i] = flow.at(t - times[0])
        else:
            u = (t - switch) / max(times[-1] - switch, 1e-12)
            knots[i] = bridge.path.evaluate(bridge.path.times[0] + u * span_b)
    return knots


def minimize_action(
    table: JumpRateTable,
    x0,
    xT,
    t: float,
    knots: int = 50,
    max_iter: int = 250,
    starts: tuple = ("line", "lln-bridge", "perturb-1e-2", "perturb-1e-3"),
) -> ActionReport:
    """Upper bound on the minimal action J_t from x0 to xT in time t.

    Optimizes the interior knots of a piecewise-linear path on a uniform
    grid by projected gradient descent, multi-started from the straight
    line, an LLN-plus-interior-bridge path, and interior-perturbed variants
    of the straight line; returns the best path with diagnostics.
    """
    if t <= 0:
        raise ModelError(f"horizon must be positive, got {t}")
    if knots < 2:
        raise ModelError("need at least 2 knots")
    x0 = np.asarray(getattr(x0, "coords", x0), dtype=float)
    xT = np.asarray(getattr(xT, "coords", xT), dtype=float)
    times = np.linspace(0.0, t, knots)
    candidates = {}
    line = _straight_line(x0, xT, times)
    if "line" in starts:
        candidates["line"] = line
    if "lln-bridge" in starts:
        bridged = _lln_bridge_start(table, x0, xT, times)
        if bridged is not None:
            bridged[0], bridged[-1] = x0, xT
            candidates["lln-bridge"] = bridged
    for label, rho in (("perturb-1e-2", 1e-2), ("perturb-1e-3", 1e-3)):
        if label in starts:
            base = PiecewiseLinearPath(times, _project_simplex(line))
            pert = perturb_path(table, base, rho).resample(times).knots
            # fade the perturbation out so the endpoint stays prescribed
            fade = np.linspace(0.0, 1.0, knots)[:, None]
            pert = (1 - fade) * pert + fade * line
            pert[0], pert[-1] = x0, xT
            candidates[label] = _project_simplex(pert)
    best = None
    per_start = {}
    for label, start in candidates.items():
        opt_knots, value, diag = _optimize_knots(
            table, times, np.array(start), max_iter=max_iter
        )
        per_start[label] = {"value": value, **diag}
        if best is None or value < best[1]:
            best = (opt_knots, value, label)
    if best is None or not math.isfinite(best[1]):
        path = PiecewiseLinearPath(times, _project_simplex(line))
        return ActionReport(
            path, math.inf, np.full(knots - 1, math.inf),
            diagnostics={"starts": per_start, "error": "all starts infeasible"},
        )
    path = PiecewiseLinearPath(times, best[0])
    report = path_action(table, path)
    return ActionReport(
        path,
        report.value,
        report.segment_values,
        diagnostics={"starts": per_start, "best_start": best[2]},
    )


def quasipotential(
    table: JumpRateTable,
    x,
    y,
    horizons=(0.25, 0.5, 1.0, 2.0, 4.0, 8.0),
    knots: int = 50,
    max_iter: int = 250,
    waypoints=(),
    starts=("line", "lln-bridge", "perturb-1e-2", "perturb-1e-3"),
):
    """Minimal action from x to y over a geometric grid of horizons.

    Additionally seeds the search with concatenations through the given
    waypoints.  Returns (value, best ActionReport, per-candidate values).
    """
    x = np.asarray(getattr(x, "coords", x), dtype=float)
    y = np.asarray(getattr(y, "coords", y), dtype=float)
    if np.abs(x - y).max() < 1e-12:
        path = PiecewiseLinearPath(np.array([0.0, 1.0]), np.vstack([x, y]))
        return 0.0, ActionReport(path, 0.0, np.zeros(1)), {}
    per_candidate = {}
    best = None
    for T in horizons:
        report = minimize_action(table, x, y, T, knots=knots, max_iter=max_iter,
                                 starts=starts)
        per_candidate[T] = report.value
        if best is None or report.value < best.value:
            best = report
    for w in waypoints:
        v1, r1, _ = quasipotential(
            table, x, w, horizons=horizons, knots=knots, max_iter=max_iter,
            starts=starts,
        )
        v2, r2, _ = quasipotential(
            table, w, y, horizons=horizons, knots=knots, max_iter=max_iter,
            starts=starts,
        )
        if math.isfinite(v1) and math.isfinite(v2) and r1.path.segments and r2.path.segments:
            joined = r1.path.concatenate(r2.path)
            report = path_action(table, joined)
            per_candidate[f"via-{tuple(np.round(w, 6))}"] = report.value
            if report.value < best.value:
                best = report
    return best.value, best, per_candidate


def sanov_cost(mu0, nu) -> float:
    """Relative entropy sum mu0_i log(mu0_i / nu_i); +inf off the support."""
    a = np.asarray(getattr(mu0, "coords", mu0), dtype=float)
    b = np.asarray(getattr(nu, "coords", nu), dtype=float)
    mask = a > 0
    if np.any(b[mask] <= 0):
        return math.inf
    return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))


def reparametrization_check(table: JumpRateTable, path: PiecewiseLinearPath, c: float):
    """Actions of the path and of its time reparametrization s -> path(c s)."""
    if not 0.5 <= c <= 2.0:
        raise ModelError(f"c must lie in [0.5, 2], got {c}")
    base = path_action(table, path)
    scaled = path_action(table, path.time_scaled(c))
    return base.value, scaled.value
