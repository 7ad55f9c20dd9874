"""Exact and controlled simulation of the empirical measure, exact transient
distributions, and Monte-Carlo decay-rate estimation.

Simulation operates on particle counts (lattice points scaled by n); the
finite-n rates vanish exactly whenever a jump would leave the lattice, so
the chain is automatically confined.  Replicates draw from counter-based
Philox streams keyed by (seed, replicate index), which makes every estimate
reproducible and embarrassingly parallel.

Two samplers are provided per process: an event-by-event reference sampler
returning full trajectories, and a lockstep thinning sampler that advances
many replicates at once (used by the Monte-Carlo estimators).  Both are
exact in distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.stats import poisson

from .model import LatticePoint, ModelError, nearest_lattice_point
from .rates import JumpRateTable, _factorial

__all__ = [
    "stream",
    "TrajectorySample",
    "ControlSignal",
    "gillespie_run",
    "controlled_run",
    "build_tilt_control",
    "TransientDistribution",
    "exact_transient",
    "birth_chain_bound",
    "excursion_bound",
    "RareEventEstimate",
    "mc_rate_estimate",
    "batch_final_states",
    "batch_lln_deviation",
    "batch_controlled_weights",
]

STATE_SPACE_CAP = 200_000


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for replicate ``index`` of experiment ``seed``."""
    key = np.array([seed % (1 << 64), index % (1 << 64)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _as_generator(s):
    if isinstance(s, np.random.Generator):
        return s
    if isinstance(s, tuple):
        return stream(*s)
    return stream(int(s))


@dataclass(frozen=True, eq=False)
class TrajectorySample:
    """One simulated path: jump times, per-jump direction index, counts.

    ``counts[0]`` is the initial state; ``counts[j+1]`` the state after the
    jump at ``times[j]`` in direction ``directions[j]``.  ``log_lr`` carries
    the log Radon-Nikodym derivative of the nominal law with respect to the
    simulating law (zero for nominal runs).
    """

    n: int
    times: np.ndarray
    directions: np.ndarray
    counts: np.ndarray
    horizon: float
    stream_id: tuple
    log_lr: float = 0.0
    suppressed: int = 0

    @property
    def jumps(self):
        return len(self.times)

    def final_counts(self):
        return self.counts[-1]

    def final_point(self) -> LatticePoint:
        return LatticePoint(self.counts[-1], self.n)

    def state_at(self, t):
        idx = int(np.searchsorted(self.times, t, side="right"))
        return self.counts[idx]

    def max_deviation(self, reference):
        """sup over jump times (and the horizon) of the distance between the
        empirical measure and ``reference`` (an LlnTrajectory)."""
        ts = np.append(self.times, self.horizon)
        ref = np.atleast_2d(reference.at(ts))
        emp = self.counts[np.minimum(np.arange(1, len(ts) + 1), len(self.counts) - 1)]
        dev = np.abs(emp / self.n - ref).max() if len(ts) else 0.0
        start = np.abs(self.counts[0] / self.n - reference.at(0.0)).max()
        return float(max(dev, start))


def _rates_at(table, counts, n):
    lam = table.finite_n_rates_batch(counts.astype(float), n)
    return n * lam


def gillespie_run(table: JumpRateTable, n: int, x0: LatticePoint, T: float, rng) -> TrajectorySample:
    """Exact continuous-time sample of the empirical measure chain.

    Holding times are exponential with the total jump intensity
    n * sum_v lam_v^n(x); zero total intensity absorbs the path.
    """
    rng_id = rng if isinstance(rng, tuple) else ("gen", 0)
    rng = _as_generator(rng)
    if x0.n != n:
        raise ModelError(f"initial point has population {x0.n}, expected {n}")
    deltas = table.direction_matrix().astype(np.int64)
    c = x0.counts.astype(np.int64).copy()
    t = 0.0
    times, dirs, states = [], [], [c.copy()]
    while True:
        rates = _rates_at(table, c, n)
        if np.any(rates < -1e-9):
            raise ModelError(f"negative jump rate at counts {c}")
        total = float(rates.sum())
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t > T:
            break
        j = int(np.searchsorted(np.cumsum(rates) / total, rng.random()))
        j = min(j, len(rates) - 1)
        c = c + deltas[j]
        times.append(t)
        dirs.append(j)
        states.append(c.copy())
    return TrajectorySample(
        n,
        np.array(times),
        np.array(dirs, dtype=np.int64),
        np.array(states, dtype=np.int64),
        T,
        rng_id,
    )


# --- controlled (tilted) simulation -----------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Piecewise-constant nonnegative jump intensities per direction.

    On [breaks[p], breaks[p+1]) the empirical measure jumps in direction v(j)
    at intensity n * rates[p, j], independent of the state; jumps that would
    leave the lattice are suppressed.
    """

    breaks: np.ndarray
    rates: np.ndarray  # (pieces, nv)

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        if b.ndim != 1 or len(b) != len(r) + 1:
            raise ModelError("need len(breaks) == len(rates) + 1")
        if np.any(np.diff(b) <= 0):
            raise ModelError("piece boundaries must increase")
        if np.any(r < 0):
            raise ModelError("control intensities must be nonnegative")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "rates", r)

    @property
    def pieces(self):
        return len(self.rates)

    @property
    def bound(self):
        return float(self.rates.max())

    def at(self, t):
        p = int(np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.pieces - 1))
        return self.rates[p]


def build_tilt_control(table: JumpRateTable, optimal, n: int) -> ControlSignal:
    """Piecewise-constant control from a finite-action path: the minimizing
    flows q_v at each segment midpoint, floored at 1e-12."""
    if not optimal.finite:
        raise ModelError("cannot build a control from an infinite-action path")
    q = optimal.segment_flows(table)
    return ControlSignal(optimal.path.times, np.maximum(q, 1e-12))


def controlled_run(
    table: JumpRateTable, n: int, x0: LatticePoint, T: float, control, rng
) -> TrajectorySample:
    """Simulate under state-independent controlled intensities and accumulate
    the exact log-likelihood ratio of the nominal law against the control.

    ``control`` is a ControlSignal, or a callback (t, counts) -> intensities
    (held constant until the next jump; passing the nominal rates reproduces
    the nominal law with zero log-likelihood ratio).  Jumps that would leave
    the lattice are suppressed and logged; the likelihood accounting uses
    the effective (suppressed) intensities, so importance-sampling weights
    stay unbiased.
    """
    rng_id = rng if isinstance(rng, tuple) else ("gen", 0)
    rng = _as_generator(rng)
    if x0.n != n:
        raise ModelError(f"initial point has population {x0.n}, expected {n}")
    deltas = table.direction_matrix().astype(np.int64)
    nv = table.nv
    is_signal = isinstance(control, ControlSignal)
    if is_signal and (control.breaks[0] > 0 or control.breaks[-1] < T - 1e-12):
        raise ModelError(f"control pieces do not cover [0, {T}]")
    c = x0.counts.astype(np.int64).copy()
    t = 0.0
    log_lr = 0.0
    suppressed = 0
    times, dirs, states = [], [], [c.copy()]

    def feasible(counts):
        return np.all(counts[None, :] + deltas >= 0, axis=1)

    while t < T:
        if is_signal:
            p = int(np.clip(np.searchsorted(control.breaks, t, side="right") - 1, 0, control.pieces - 1))
            piece_end = min(float(control.breaks[p + 1]), T) if p + 1 < len(control.breaks) else T
            alpha = control.rates[p]
        else:
            piece_end = T
            alpha = np.asarray(control(t, c), dtype=float)
            if alpha.shape != (nv,):
                raise ModelError(f"control callback must return {nv} intensities")
        # effective intensities vanish where the jump would exit the lattice
        feas = feasible(c)
        alpha_eff = np.where(feas, alpha, 0.0)
        lam = _rates_at(table, c, n) / n
        comp_rate = n * float((lam - alpha_eff).sum())
        total = float(alpha.sum())
        if total <= 0:
            log_lr -= comp_rate * (piece_end - t)
            t = piece_end
            if t >= T:
                break
            continue
        # candidate jumps fire at the unsuppressed intensity; infeasible
        # draws are dropped, which realizes the suppressed process exactly
        dt = rng.exponential(1.0 / (n * total))
        t_next = t + dt
        if t_next >= piece_end:
            log_lr -= comp_rate * (piece_end - t)
            t = piece_end
            continue
        log_lr -= comp_rate * dt
        t = t_next
        j = int(np.searchsorted(np.cumsum(alpha) / total, rng.random()))
        j = min(j, nv - 1)
        if not feas[j]:
            suppressed += 1
            continue
        if lam[j] <= 0:
            log_lr = -math.inf  # nominally impossible jump: zero weight
        else:
            log_lr += math.log(lam[j] / alpha_eff[j])
        c = c + deltas[j]
        times.append(t)
        dirs.append(j)
        states.append(c.copy())
    return TrajectorySample(
        n,
        np.array(times),
        np.array(dirs, dtype=np.int64),
        np.array(states, dtype=np.int64),
        T,
        rng_id,
        log_lr=log_lr,
        suppressed=suppressed,
    )


# --- lockstep batch samplers -------------------------------------------------------


def _rate_cap(table, n):
    """Rigorous upper bound on the total jump intensity / n.

    Uses A_k <= n^k and the grid maximum of each transition rate with a
    5 percent cushion; every slot asserts the bound at runtime.
    """
    from .model import validation_grid

    grid = validation_grid(table.d)
    cap = 0.0
    for contribs in table.contributions:
        for c in contribs:
            gmax = float(np.max(c.rate_fn(grid)))
            cap += c.multiplicity * gmax / _factorial(c.k)
    return 1.05 * cap + 1e-9


def batch_final_states(table, n, counts0, T, rng, reps, reference=None,
                       ref_norm: str = "max"):
    """Advance ``reps`` nominal replicates by lockstep thinning.

    Returns (final counts (reps, d), deviation from ``reference`` per
    replicate or None); the deviation is the running maximum over jump
    times of the max-coordinate (``ref_norm='max'``) or Euclidean
    (``'euclid'``) distance.  Distributionally exact: dominating Poisson
    clock at the rigorous rate cap, thinned by the true jump intensities.
    """
    rng = _as_generator(rng)
    deltas = table.direction_matrix().astype(np.int64)
    counts = np.broadcast_to(np.asarray(counts0, dtype=np.int64), (reps, table.d)).copy()
    cap = _rate_cap(table, n)
    lam_cap = n * cap

    def _dist(a, b):
        if ref_norm == "euclid":
            return np.linalg.norm(a - b, axis=1)
        return np.abs(a - b).max(axis=1)

    dev = None
    if reference is not None:
        dev = _dist(counts / n, np.atleast_2d(reference.at(0.0)))
    t = np.zeros(reps)
    while True:
        t = t + rng.exponential(1.0 / lam_cap, size=reps)
        active = t <= T
        if not active.any():
            break
        rates = n * table.finite_n_rates_batch(counts.astype(float), n)
        total = rates.sum(axis=1)
        if np.any(total > lam_cap * (1 + 1e-9)):
            raise ModelError("rate cap violated; model rates exceed grid bound")
        u = rng.random(reps) * lam_cap
        cum = np.cumsum(rates, axis=1)
        jumped = active & (u < total)
        j = np.argmax(u[:, None] < cum, axis=1)
        counts[jumped] += deltas[j[jumped]]
        if reference is not None:
            ref = np.atleast_2d(reference.at(np.clip(t, 0.0, T)))
            cur = _dist(counts / n, ref)
            dev = np.maximum(dev, np.where(active, cur, dev))
    if reference is not None:
        dev = np.maximum(dev, _dist(counts / n, np.atleast_2d(reference.at(T))))
    return counts, dev


def batch_controlled_weights(table, n, counts0, control: ControlSignal, T, rng, reps,
                             final_event=None):
    """Advance controlled replicates in lockstep and return
    (final counts, log-likelihood ratios, suppression counts).

    Within a control piece the total intensity is constant, so per piece the
    jump count is Poisson and jump times are sorted uniforms; the state and
    the exact likelihood ratio evolve deterministically between jumps.
    """
    rng = _as_generator(rng)
    deltas = table.direction_matrix().astype(np.int64)
    nv = table.nv
    counts = np.broadcast_to(np.asarray(counts0, dtype=np.int64), (reps, table.d)).copy()
    log_lr = np.zeros(reps)
    suppressed = np.zeros(reps, dtype=np.int64)
    t_mark = np.zeros(reps)  # time up to which the compensator is integrated
    if control.breaks[0] > 0 or control.breaks[-1] < T - 1e-12:
        raise ModelError(f"control pieces do not cover [0, {T}]")
    breaks = np.clip(control.breaks, 0.0, T)
    for p in range(control.pieces):
        t0, t1 = float(breaks[p]), float(breaks[p + 1] if p + 1 < len(breaks) else T)
        t1 = min(t1, T)
        if t1 <= t0:
            continue
        alpha = control.rates[p]
        total_alpha = float(alpha.sum())
        if total_alpha <= 0:
            lam = table.finite_n_rates_batch(counts.astype(float), n)
            feas = _feasible_mask(counts, deltas)
            log_lr -= n * (t1 - t0) * (lam.sum(axis=1) - (alpha * feas).sum(axis=1))
            t_mark[:] = t1
            continue
        probs = alpha / total_alpha
        k = rng.poisson(n * total_alpha * (t1 - t0), size=reps)
        kmax = int(k.max()) if reps else 0
        if kmax == 0:
            lam = table.finite_n_rates_batch(counts.astype(float), n)
            feas = _feasible_mask(counts, deltas)
            log_lr -= n * (t1 - t0) * (lam.sum(axis=1) - (alpha * feas).sum(axis=1))
            t_mark[:] = t1
            continue
        times = np.full((reps, kmax), np.inf)
        u = rng.random((reps, kmax))
        mask_k = np.arange(kmax)[None, :] < k[:, None]
        times[mask_k] = u[mask_k]
        times.sort(axis=1)
        times = t0 + times * (t1 - t0)
        dir_draws = rng.choice(nv, size=(reps, kmax), p=probs)
        for e in range(kmax):
            active = mask_k[:, e]
            if not active.any():
                break
            lam = table.finite_n_rates_batch(counts.astype(float), n)
            feas = _feasible_mask(counts, deltas)
            alpha_eff_sum = feas @ alpha
            dt = np.where(active, times[:, e] - t_mark, 0.0)
            log_lr -= n * dt * (lam.sum(axis=1) - alpha_eff_sum)
            t_mark = np.where(active, times[:, e], t_mark)
            j = dir_draws[:, e]
            ok = active & feas[np.arange(reps), j]
            suppressed += (active & ~ok).astype(np.int64)
            lam_j = lam[np.arange(reps), j]
            with np.errstate(divide="ignore"):
                contrib = np.log(np.where(lam_j > 0, lam_j, 1.0) / alpha[j])
            contrib = np.where(lam_j > 0, contrib, -np.inf)
            log_lr = np.where(ok, log_lr + contrib, log_lr)
            counts[ok] += deltas[j[ok]]
        # integrate the compensator to the end of the piece
        lam = table.finite_n_rates_batch(counts.astype(float), n)
        feas = _feasible_mask(counts, deltas)
        log_lr -= n * np.maximum(t1 - t_mark, 0.0) * (lam.sum(axis=1) - feas @ alpha)
        t_mark[:] = t1
    return counts, log_lr, suppressed


def _feasible_mask(counts, deltas):
    return np.all(counts[:, None, :] + deltas[None, :, :] >= 0, axis=2)


# --- exact transient distribution --------------------------------------------------


def _enumerate_lattice(n, d):
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for c in range(remaining + 1):
            rec(prefix + (c,), remaining - c, slots - 1)

    rec((), n, d)
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TransientDistribution:
    """Distribution of the chain at a fixed time over the full lattice."""

    n: int
    states: np.ndarray  # (S, d) counts
    probabilities: np.ndarray
    truncation_error: float
    terms: int

    def probability_of(self, point) -> float:
        counts = point.counts if isinstance(point, LatticePoint) else np.asarray(point)
        match = np.all(self.states == np.asarray(counts, dtype=np.int64), axis=1)
        idx = np.nonzero(match)[0]
        return float(self.probabilities[idx[0]]) if idx.size else 0.0


def exact_transient(table: JumpRateTable, n: int, x0: LatticePoint, T: float,
                    tail: float = 1e-12) -> TransientDistribution:
    """Transient distribution by uniformization (Poisson mixture of powers of
    the embedded kernel); truncation tail below ``tail``."""
    d = table.d
    size = math.comb(n + d - 1, d - 1)
    if size > STATE_SPACE_CAP:
        raise ModelError(f"lattice has {size} states, above the cap {STATE_SPACE_CAP}")
    states = _enumerate_lattice(n, d)
    index = {tuple(s): i for i, s in enumerate(states)}
    rates = n * table.finite_n_rates_batch(states.astype(float), n)  # (S, nv)
    deltas = table.direction_matrix().astype(np.int64)
    rows, cols, vals = [], [], []
    for j in range(table.nv):
        nz = np.nonzero(rates[:, j] > 0)[0]
        for i in nz:
            target = tuple(states[i] + deltas[j])
            t_idx = index.get(target)
            if t_idx is None:
                raise ModelError("positive rate for a jump leaving the lattice")
            rows.append(i)
            cols.append(t_idx)
            vals.append(rates[i, j])
    exit_rate = rates.sum(axis=1)
    lam_max = float(exit_rate.max())
    if T == 0 or lam_max == 0:
        p = np.zeros(size)
        p[index[tuple(x0.counts)]] = 1.0
        return TransientDistribution(n, states, p, 0.0, 0)
    uni = lam_max * (1.0 + 1e-12)
    P = sparse.csr_matrix(
        (np.asarray(vals) / uni, (rows, cols)), shape=(size, size)
    )
    P = P + sparse.diags(1.0 - exit_rate / uni)
    row_sums = np.asarray(P.sum(axis=1)).ravel()
    if np.abs(row_sums - 1.0).max() > 1e-14:
        raise ModelError("embedded kernel rows do not sum to 1")
    a = uni * T
    terms = int(poisson.isf(tail / 10.0, a)) + 2
    p = np.zeros(size)
    p[index[tuple(x0.counts)]] = 1.0
    log_w = -a
    weight = math.exp(log_w)
    acc = weight * p
    used = weight
    vec = p
    for k in range(1, terms + 1):
        vec = vec @ P
        log_w += math.log(a / k)
        weight = math.exp(log_w)
        acc = acc + weight * vec
        used += weight
    return TransientDistribution(n, states, acc, max(1.0 - used, 0.0), terms)


# --- closed-form bounds -------------------------------------------------------------


def birth_chain_bound(b, c: float, t: float) -> float:
    """Lower bound (prod b_i / N!) t^N e^{-ct} on reaching the end of an
    N-step chain whose i-th forward rate is b_i and whose total exit rates
    are at most c."""
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0) or c < 0 or t < 0:
        raise ModelError("need positive forward rates and nonnegative c, t")
    N = len(b)
    return float(np.prod(b) / _factorial(N) * t**N * math.exp(-c * t))


def excursion_bound(table: JumpRateTable, n: int, delta: float, tau: float) -> float:
    """Martingale bound 2 d exp(-tau n lbar(delta / (2 sqrt(d) tau))) on the
    probability of a sup-norm excursion of size delta by time tau.

    Requires tau <= delta / (2 sqrt(d) C2) with C1 = max ||v||,
    C2 = R |V| C1, and lbar(r) = r (log(r / C2) - 1) / C1.
    """
    d = table.d
    c1 = table.max_direction_norm()
    c2 = table.rate_bound() * table.nv * c1
    limit = delta / (2.0 * math.sqrt(d) * c2)
    if tau > limit + 1e-15:
        raise ModelError(f"need tau <= {limit}, got {tau}")
    rho = delta / (2.0 * math.sqrt(d) * tau)
    lbar = rho * (math.log(rho / c2) - 1.0) / c1
    return float(2 * d * math.exp(-tau * n * lbar))


def batch_lln_deviation(table, n, counts0, T, seed, reps, lln_traj):
    """Sup-norm deviation of nominal replicates from the LLN path."""
    _, dev = batch_final_states(
        table, n, counts0, T, stream(seed), reps, reference=lln_traj
    )
    return dev


# --- Monte-Carlo decay estimation ---------------------------------------------------


@dataclass(frozen=True)
class PointEvent:
    """The chain sits exactly at the nearest lattice point to ``target`` at T."""

    target: tuple


@dataclass(frozen=True)
class FinalStateEvent:
    """Event decided by the final counts: fn(counts (R, d), n) -> bool (R,)."""

    fn: object
    label: str = "final-state"


@dataclass(frozen=True)
class PathEvent:
    """Event decided on the whole TrajectorySample (per-replicate sampling)."""

    fn: object
    label: str = "path"


@dataclass(frozen=True, eq=False)
class RareEventEstimate:
    """Per-population estimates and the extrapolated decay rate."""

    per_n: tuple
    rate: float
    coefficients: tuple
    censored: bool

    def decays(self):
        return [(row["n"], row["decay"]) for row in self.per_n]


def _extrapolate(ns, decays):
    """Least squares of decay against (1, 1/n, log n / n); the intercept is
    the n -> infinity rate.  Falls back to fewer regressors for short lists."""
    ns = np.asarray(ns, dtype=float)
    y = np.asarray(decays, dtype=float)
    cols = [np.ones_like(ns), 1.0 / ns, np.log(ns) / ns]
    k = min(len(cols), max(1, len(ns) - 1))
    A = np.column_stack(cols[:k])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0]), tuple(float(c) for c in coef)


def mc_rate_estimate(
    table: JumpRateTable,
    event,
    ns,
    reps: int,
    T: float = 1.0,
    control=None,
    seed: int = 42,
    x0=None,
) -> RareEventEstimate:
    """Estimate P(event) per population and extrapolate the decay rate.

    ``event``: PointEvent, FinalStateEvent, or PathEvent.  Point events use
    the exact transient distribution whenever the lattice fits the cap.
    ``control`` (optional): ControlSignal, or a mapping/callable n -> signal,
    switching the sampler to importance sampling with exact weights.
    ``x0``: simplex point; each population starts at its nearest lattice
    point.  Extrapolation regresses the decays on (1, 1/n, log n / n).
    """
    if reps < 100:
        raise ModelError("need at least 100 replicates")
    if x0 is None:
        raise ModelError("an initial point x0 is required")
    rows = []
    censored = False
    for i, n in enumerate(ns):
        start = nearest_lattice_point(np.asarray(x0, dtype=float), n)
        ctrl = None
        if control is not None:
            if isinstance(control, ControlSignal):
                ctrl = control
            elif callable(control):
                ctrl = control(n)
            else:
                ctrl = control[n]
        row = {"n": int(n), "reps": int(reps)}
        if isinstance(event, PointEvent) and math.comb(n + table.d - 1, table.d - 1) <= STATE_SPACE_CAP:
            dist = exact_transient(table, n, start, T)
            target = nearest_lattice_point(np.asarray(event.target, dtype=float), n)
            p_hat = dist.probability_of(target)
            row.update(p_hat=p_hat, stderr=0.0, method="uniformization")
        else:
            rng = stream(seed, i)
            if isinstance(event, PointEvent):
                target = nearest_lattice_point(np.asarray(event.target, dtype=float), n)
                fn = lambda counts, n_, tc=tuple(target.counts): np.all(
                    counts == np.asarray(tc), axis=1
                )
            elif isinstance(event, FinalStateEvent):
                fn = event.fn
            elif isinstance(event, PathEvent):
                fn = None
            else:
                raise ModelError(f"unsupported event {event!r}")
            if fn is not None and ctrl is None:
                finals, _ = batch_final_states(table, n, start.counts, T, rng, reps)
                hits = np.asarray(fn(finals, n), dtype=float)
                p_hat = float(hits.mean())
                stderr = float(hits.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
                row.update(p_hat=p_hat, stderr=stderr, method="gillespie")
            elif fn is not None:
                finals, log_lr, _ = batch_controlled_weights(
                    table, n, start.counts, ctrl, T, rng, reps
                )
                ind = np.asarray(fn(finals, n), dtype=bool)
                w = np.where(ind, np.exp(np.where(ind, log_lr, -np.inf)), 0.0)
                p_hat = float(w.mean())
                stderr = float(w.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
                row.update(p_hat=p_hat, stderr=stderr, method="importance")
            else:
                hits = []
                for r in range(reps):
                    if ctrl is None:
                        sample = gillespie_run(table, n, start, T, stream(seed, i * reps + r))
                        hits.append(1.0 if event.fn(sample) else 0.0)
                    else:
                        sample = controlled_run(
                            table, n, start, T, ctrl, stream(seed, i * reps + r)
                        )
                        hits.append(
                            math.exp(sample.log_lr) if event.fn(sample) else 0.0
                        )
                hits = np.asarray(hits)
                p_hat = float(hits.mean())
                stderr = float(hits.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
                row.update(
                    p_hat=p_hat,
                    stderr=stderr,
                    method="importance" if ctrl is not None else "gillespie",
                )
        if row["p_hat"] <= 0:
            censored = True
            row["decay"] = math.inf
        else:
            row["decay"] = -math.log(row["p_hat"]) / n
        rows.append(row)
    usable = [(r["n"], r["decay"]) for r in rows if math.isfinite(r["decay"])]
    if len(usable) >= 2:
        rate, coef = _extrapolate([u[0] for u in usable], [u[1] for u in usable])
    elif usable:
        rate, coef = usable[0][1], (usable[0][1],)
    else:
        rate, coef = math.inf, ()
    return RareEventEstimate(tuple(rows), rate, coef, censored)
