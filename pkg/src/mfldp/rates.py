"""Empirical-measure jump rates derived from a ModelSpec.

A k-tuple transition moves the scaled empirical measure by v = e_to - e_frm.
Aggregating all transitions sharing a direction v gives the jump rate

    limit:    lam_v(x)   = sum mult/k! * prod_l x_{frm_l} * rate(x)
    finite n: lam_v^n(x) = sum mult * A_k(n, frm, x) * n**(1-k) * rate(x) / (n k!)

where A_k counts ordered k-tuples of distinct particles realizing the source
configuration (a product of falling factorials of the state counts, which is
exactly zero whenever the jump would leave the lattice).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    JumpDirection,
    LatticePoint,
    ModelError,
    ModelSpec,
    Finding,
    direction_of,
    validation_grid,
)

__all__ = [
    "tuple_count",
    "JumpRateTable",
    "NegativeSupport",
    "build_rate_table",
    "limit_rates",
    "finite_n_rates",
    "effective_matrix",
    "classify_transitions",
    "rate_estimate_report",
]

ZERO_TOL = 1e-12
POSITIVE_TOL = 1e-9


def _falling_factorial(counts, m):
    """prod_{r=0}^{m-1} (counts - r), vectorized over counts."""
    counts = np.asarray(counts, dtype=float)
    out = np.ones_like(counts)
    for r in range(m):
        out = out * (counts - r)
    return np.maximum(out, 0.0)


def tuple_count(n: int, tup, x: LatticePoint) -> int:
    """Number of ordered tuples of distinct particles in configuration ``tup``.

    Exact count: for each state s with multiplicity m_s in the tuple this
    contributes (n x_s)(n x_s - 1)...(n x_s - m_s + 1).
    """
    if x.n != n:
        raise ModelError(f"lattice point has population {x.n}, expected {n}")
    mult = {}
    for s in tup:
        mult[s] = mult.get(s, 0) + 1
    total = 1
    for s, m in mult.items():
        c = int(x.counts[s - 1])
        for r in range(m):
            total *= max(c - r, 0)
    return total


def classify_transitions(spec: ModelSpec, grid=None) -> list:
    """Per-transition classification on the validation grid.

    Returns one of "positive" (min > 1e-9), "zero" (all < 1e-12) or "mixed"
    per listed transition.
    """
    if grid is None:
        grid = validation_grid(spec.d)
    labels = []
    for t in spec.transitions:
        values = t.rate.compiled()(grid)
        if np.all(np.abs(values) < ZERO_TOL):
            labels.append("zero")
        elif np.min(values) > POSITIVE_TOL:
            labels.append("positive")
        else:
            labels.append("mixed")
    return labels


@dataclass(frozen=True)
class _Contribution:
    """One expanded transition feeding a direction."""

    transition: object
    multiplicity: int
    classification: str
    source_states: tuple  # 0-based state indices
    source_mults: tuple  # multiplicities aligned with source_states
    rate_fn: object = field(repr=False)

    @property
    def k(self):
        return self.transition.k

    @property
    def n_exponent(self):
        e = self.transition.n_exponent
        return (1 - self.k) if e is None else e


@dataclass(frozen=True)
class NegativeSupport:
    """Negative coordinates of a direction and source multiplicities there."""

    direction: JumpDirection
    indices: tuple  # 1-based states i with v_i < 0
    profiles: tuple  # per positive contribution: dict state -> multiplicity


@dataclass(frozen=True, eq=False)
class JumpRateTable:
    """Directionwise jump-rate evaluators for one model.

    Directions whose every contributing rate is identically zero on the
    validation grid are dropped.  ``n`` is set when built by finite_n_rates
    and only fixes the default population for finite-n evaluation.
    """

    spec: ModelSpec
    directions: tuple
    contributions: tuple  # tuple (per direction) of tuples of _Contribution
    n: int | None = None

    # --- basic geometry

    @property
    def d(self):
        return self.spec.d

    @property
    def nv(self):
        return len(self.directions)

    def direction_matrix(self):
        return np.array([v.delta for v in self.directions], dtype=float)

    def max_direction_norm(self):
        return float(max(np.linalg.norm(v.as_array()) for v in self.directions))

    def index_of(self, direction: JumpDirection):
        return self.index_of_delta(direction.delta)

    def index_of_delta(self, delta):
        delta = tuple(int(v) for v in delta)
        for i, v in enumerate(self.directions):
            if v.delta == delta:
                return i
        raise KeyError(f"direction {delta} not in table")

    # --- limit rates

    def limit_rates_batch(self, X):
        """lam_v at simplex points; X has shape (..., d), result (..., nv)."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[:-1] + (self.nv,))
        for j, contribs in enumerate(self.contributions):
            acc = 0.0
            for c in contribs:
                prod = c.multiplicity / _factorial(c.k)
                term = np.full(X.shape[:-1], prod)
                for s, m in zip(c.source_states, c.source_mults):
                    term = term * X[..., s] ** m
                acc = acc + term * c.rate_fn(X)
            out[..., j] = acc
        return out

    def limit_rates_at(self, x):
        coords = np.asarray(getattr(x, "coords", x), dtype=float)
        return self.limit_rates_batch(coords)

    def limit_rate(self, direction, x):
        return float(self.limit_rates_at(x)[self.index_of(direction)])

    # --- finite-n rates (exact on the lattice)

    def finite_n_rates_batch(self, counts, n=None):
        """lam_v^n at lattice points; counts has shape (..., d)."""
        n = self._population(n)
        counts = np.asarray(counts, dtype=float)
        X = counts / n
        out = np.zeros(counts.shape[:-1] + (self.nv,))
        for j, contribs in enumerate(self.contributions):
            acc = 0.0
            for c in contribs:
                coef = c.multiplicity * float(n) ** c.n_exponent / (n * _factorial(c.k))
                term = np.full(counts.shape[:-1], coef)
                for s, m in zip(c.source_states, c.source_mults):
                    term = term * _falling_factorial(counts[..., s], m)
                acc = acc + term * c.rate_fn(X)
            out[..., j] = acc
        return out

    def finite_n_rates_at(self, point: LatticePoint, n=None):
        n = self._population(n)
        if point.n != n:
            raise ModelError(f"lattice point has population {point.n}, expected {n}")
        return self.finite_n_rates_batch(point.counts, n)

    def _population(self, n):
        n = n if n is not None else self.n
        if n is None:
            raise ModelError("no population n bound to this table")
        if n < self.spec.K:
            raise ModelError(f"population n={n} below the max tuple size {self.spec.K}")
        return int(n)

    # --- derived constants (grid estimates)

    def rate_bound(self, grid=None):
        """Grid maximum of lam_v over directions (estimate of sup lam)."""
        if grid is None:
            grid = validation_grid(self.d)
        return float(self.limit_rates_batch(grid).max())

    def positive_rate_floor(self):
        """Grid minimum of the positively-classified transition rates (c0 estimate)."""
        grid = validation_grid(self.d)
        lows = []
        for contribs in self.contributions:
            for c in contribs:
                if c.classification == "positive":
                    lows.append(float(np.min(c.rate_fn(grid))))
        if not lows:
            return 0.0
        return min(lows)

    def negative_supports(self):
        out = []
        for v, contribs in zip(self.directions, self.contributions):
            profiles = tuple(
                {s + 1: m for s, m in zip(c.source_states, c.source_mults)}
                for c in contribs
                if c.classification == "positive"
            )
            out.append(NegativeSupport(v, v.negative_support(), profiles))
        return out

    def positive_contributions(self, j):
        return tuple(
            c for c in self.contributions[j] if c.classification == "positive"
        )


def _factorial(k):
    out = 1
    for i in range(2, k + 1):
        out *= i
    return out


def build_rate_table(spec: ModelSpec, n=None) -> JumpRateTable:
    labels = classify_transitions(spec)
    by_direction: dict = {}
    for (t, mult), label in zip(spec.expanded(), labels):
        v = direction_of(t.frm, t.to, spec.d)
        if v.is_null:
            continue  # a swap leaves the empirical measure unchanged
        if label == "zero":
            continue
        srcs = t.source_multiplicities()
        states = tuple(sorted(srcs))
        contrib = _Contribution(
            transition=t,
            multiplicity=mult,
            classification=label,
            source_states=tuple(s - 1 for s in states),
            source_mults=tuple(srcs[s] for s in states),
            rate_fn=t.rate.compiled(),
        )
        by_direction.setdefault(v.delta, []).append(contrib)
    directions = tuple(JumpDirection(delta) for delta in sorted(by_direction))
    contributions = tuple(tuple(by_direction[v.delta]) for v in directions)
    if not directions:
        raise ModelError("model has no direction with a non-vanishing rate")
    return JumpRateTable(spec, directions, contributions, n)


def limit_rates(spec: ModelSpec) -> JumpRateTable:
    """Jump-rate table with the n -> infinity rates lam_v."""
    return build_rate_table(spec)


def finite_n_rates(spec: ModelSpec, n: int) -> JumpRateTable:
    """Jump-rate table bound to population n (exact lattice rates lam_v^n)."""
    if n < spec.K:
        raise ModelError(f"population n={n} below the max tuple size {spec.K}")
    return build_rate_table(spec, n=n)


def effective_matrix(spec: ModelSpec, x) -> np.ndarray:
    """Single-transition rate matrix whose LLN matches the tuple system.

    Entry (i, j) sums, over tuple transitions and slots l with frm_l = i and
    to_l = j, rate/k! times the product of coordinates of the other source
    slots (the n -> infinity limit of the per-slot finite-n rates, which is
    exactly what makes x Gamma_eff(x) equal the drift sum_v v lam_v(x)).
    The diagonal holds negative row sums.
    """
    coords = np.asarray(getattr(x, "coords", x), dtype=float)
    d = spec.d
    out = np.zeros((d, d))
    for t, mult in spec.expanded():
        rate = t.rate.evaluate(coords)
        if rate == 0.0:
            continue
        coef = mult * rate / _factorial(t.k)
        for l in range(t.k):
            i, j = t.frm[l] - 1, t.to[l] - 1
            others = 1.0
            for r in range(t.k):
                if r != l:
                    others *= coords[t.frm[r] - 1]
            out[i, j] += coef * others
    np.fill_diagonal(out, 0.0)
    np.fill_diagonal(out, -out.sum(axis=1))
    return out


def rate_estimate_report(spec: ModelSpec, pairs=200, seed=7):
    """Numerically verify the structural jump-rate estimates.

    Checks, on the validation grid and seeded random point pairs:
      (1) lam_v(x) <= C_hat * prod_{i in N_v} x_i with C_hat fitted;
      (2) lam_v(x)/lam_v(y) <= (1 + C_lip ||x-y|| / c0) * prod_{y_i<x_i}(x_i/y_i)^K;
      (3) lam_v(x) >= (c0/K!) * prod_i x_i^K for directions with a positive rate;
      (4) lam_v(x)/lam_v(y) >= c_bar * prod_{i in N_v}(x_i/y_i)^{r_i} when a
          common source profile exists.
    Returns (constants, findings).
    """
    table = build_rate_table(spec)
    grid = validation_grid(spec.d)
    lam = table.limit_rates_batch(grid)
    findings = []
    K = spec.K
    kfact = _factorial(K)

    c0 = table.positive_rate_floor()
    r_bound = table.rate_bound(grid)

    # (1) fit C_hat over grid points where the negative-support product is positive
    c_hat = 0.0
    supports = table.negative_supports()
    for j, ns in enumerate(supports):
        idx = [i - 1 for i in ns.indices]
        prod = np.prod(grid[:, idx], axis=1) if idx else np.ones(len(grid))
        mask = prod > 0
        if np.any(mask):
            c_hat = max(c_hat, float(np.max(lam[mask, j] / prod[mask])))
        bad = (~mask) & (lam[:, j] > POSITIVE_TOL)
        if np.any(bad):
            p = int(np.argmax(bad))
            findings.append(
                Finding(
                    "upper-bound",
                    f"lam_v > 0 with vanishing negative-support product "
                    f"(direction {ns.direction.delta})",
                    point=tuple(grid[p]),
                )
            )

    # (3) lower bound via the positive-rate floor
    floor = c0 / kfact
    full_prod = np.prod(grid, axis=1) ** K
    for j, contribs in enumerate(table.contributions):
        if not table.positive_contributions(j):
            continue
        deficit = floor * full_prod - lam[:, j]
        worst = int(np.argmax(deficit))
        if deficit[worst] > 1e-9:
            findings.append(
                Finding(
                    "lower-bound",
                    f"lam_v below (c0/K!) prod x_i^K by {deficit[worst]:.3e} "
                    f"(direction {table.directions[j].delta})",
                    point=tuple(grid[worst]),
                )
            )

    # Lipschitz estimate for the transition rates, for the ratio bound (2)
    rng = np.random.Generator(np.random.Philox(key=seed))
    expo = rng.exponential(size=(2 * pairs, spec.d))
    pts = expo / expo.sum(axis=1, keepdims=True)
    xs, ys = pts[:pairs], pts[pairs:]
    c_lip = 0.0
    for t in spec.transitions:
        f = t.rate.compiled()
        num = np.abs(f(xs) - f(ys))
        den = np.linalg.norm(xs - ys, axis=1)
        c_lip = max(c_lip, float(np.max(num / np.maximum(den, 1e-12))))

    lam_x = table.limit_rates_batch(xs)
    lam_y = table.limit_rates_batch(ys)
    slack = 1.0 + 1e-9
    if c0 > 0:
        cbar_fn = 1.0 + c_lip * np.linalg.norm(xs - ys, axis=1) / c0
        for j in range(table.nv):
            ok = lam_y[:, j] > ZERO_TOL
            ratio = np.where(ok, lam_x[:, j] / np.where(ok, lam_y[:, j], 1.0), 0.0)
            bound = cbar_fn.copy()
            for i in range(spec.d):
                up = xs[:, i] > ys[:, i]
                bound = np.where(
                    up & ok, bound * (xs[:, i] / np.maximum(ys[:, i], 1e-300)) ** K, bound
                )
            bad = ok & (ratio > bound * slack)
            if np.any(bad):
                p = int(np.argmax(bad))
                findings.append(
                    Finding(
                        "ratio-upper",
                        f"ratio {ratio[p]:.4g} exceeds bound {bound[p]:.4g} "
                        f"(direction {table.directions[j].delta})",
                        point=tuple(xs[p]),
                    )
                )

    # (4) uniform ratio lower bound where a common source profile exists
    n_plus = sum(
        c.multiplicity
        for contribs in table.contributions
        for c in contribs
        if c.classification == "positive"
    )
    cbar = c0 / (max(r_bound, 1e-300) * kfact * max(n_plus, 1))
    checked4 = 0
    for j, ns in enumerate(supports):
        profile = _common_profile(table, j, ns)
        if profile is None:
            continue
        checked4 += 1
        interior = np.min(ys, axis=1) > 1e-6
        ratio_bound = np.full(pairs, cbar)
        for i, r in profile.items():
            ratio_bound = ratio_bound * (xs[:, i - 1] / ys[:, i - 1]) ** r
        ok = interior & (lam_y[:, j] > ZERO_TOL)
        ratio = np.where(ok, lam_x[:, j] / np.where(ok, lam_y[:, j], 1.0), np.inf)
        bad = ok & (ratio < ratio_bound / slack)
        if np.any(bad):
            p = int(np.argmax(bad))
            findings.append(
                Finding(
                    "ratio-lower",
                    f"ratio {ratio[p]:.4g} below bound {ratio_bound[p]:.4g} "
                    f"(direction {table.directions[j].delta})",
                    point=tuple(xs[p]),
                )
            )

    constants = {
        "C_hat": c_hat,
        "c0": c0,
        "rate_bound": r_bound,
        "lipschitz": c_lip,
        "c_bar": cbar,
        "directions_checked_lower_ratio": checked4,
    }
    return constants, findings


def _common_profile(table, j, ns):
    """Shared source-multiplicity profile of direction j, if supported on N_v.

    Mirrors the simultaneous-jump restriction: either some transition has
    profile exactly |v_i| on the negative support (preferred), or all
    positive transitions share a single profile supported on N_v.
    """
    v = ns.direction
    exact = {i: -v.delta[i - 1] for i in ns.indices}
    profiles = ns.profiles
    if not profiles:
        return None
    if any(p == exact for p in profiles):
        return exact
    first = profiles[0]
    if all(p == first for p in profiles) and set(first) <= set(ns.indices):
        return first
    return None
