"""Domain types for finite-state mean-field particle systems.

States are labelled 1..d and probability vectors live on the unit simplex.
A model is a list of tuple transitions: an ordered k-tuple of particles in
configuration ``frm`` simultaneously moves to configuration ``to`` at a
rate given by a RateExpr over the empirical measure.  The finite-n rate of
a k-tuple transition is n**(1-k) times its limit rate.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .expr import ExprError, RateExpr, parse_rate_expr

__all__ = [
    "ModelError",
    "StateSpace",
    "SimplexPoint",
    "LatticePoint",
    "JumpDirection",
    "TupleTransition",
    "ModelSpec",
    "PiecewiseLinearPath",
    "Finding",
    "validation_grid",
    "validate_model",
    "builtin_model",
    "model_from_config",
    "model_to_config",
    "load_model_file",
]

SUM_TOL = 1e-12
RENORM_TOL = 1e-9
GRID_SEED = 20240 + 1
GRID_RANDOM_POINTS = 200


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class StateSpace:
    """The finite state set {1, ..., d}."""

    d: int

    def __post_init__(self):
        if self.d < 2:
            raise ModelError(f"need at least 2 states, got d={self.d}")

    @property
    def states(self):
        return range(1, self.d + 1)


def _as_readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SimplexPoint:
    """A probability vector on d states (nonnegative, unit mass).

    Construction renormalizes when the mass deviates from 1 by less than
    1e-9 and clamps negative coordinates of the same magnitude; larger
    deviations raise ModelError.
    """

    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim != 1 or c.size < 2:
            raise ModelError("a simplex point needs a 1-d vector of length >= 2")
        if np.min(c) < -RENORM_TOL:
            raise ModelError(f"negative coordinate {np.min(c)} in simplex point")
        c = np.maximum(c, 0.0)
        s = float(c.sum())
        if abs(s - 1.0) > RENORM_TOL:
            raise ModelError(f"coordinates sum to {s}, not 1")
        if abs(s - 1.0) > SUM_TOL:
            c = c / s
        object.__setattr__(self, "coords", _as_readonly(c))

    @property
    def d(self):
        return self.coords.size

    def __getitem__(self, i):
        return float(self.coords[i])

    def __iter__(self):
        return iter(self.coords.tolist())

    def __len__(self):
        return self.coords.size

    def __eq__(self, other):
        if not isinstance(other, SimplexPoint):
            return NotImplemented
        return np.array_equal(self.coords, other.coords)

    def __repr__(self):
        return f"SimplexPoint({self.coords.tolist()})"


@dataclass(frozen=True, eq=False)
class LatticePoint:
    """Empirical measure of an n-particle configuration: counts per state."""

    counts: np.ndarray
    n: int

    def __post_init__(self):
        c = np.asarray(self.counts)
        if not np.issubdtype(c.dtype, np.integer):
            rounded = np.rint(np.asarray(c, dtype=float)).astype(np.int64)
            if not np.allclose(c, rounded):
                raise ModelError("lattice counts must be integers")
            c = rounded
        c = c.astype(np.int64)
        if np.any(c < 0):
            raise ModelError("lattice counts must be nonnegative")
        if int(c.sum()) != self.n:
            raise ModelError(f"counts sum to {int(c.sum())}, expected n={self.n}")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def d(self):
        return self.counts.size

    def to_simplex(self) -> SimplexPoint:
        return SimplexPoint(self.counts / self.n)

    def __eq__(self, other):
        if not isinstance(other, LatticePoint):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"LatticePoint({self.counts.tolist()}, n={self.n})"


def nearest_lattice_point(x, n: int) -> LatticePoint:
    """Closest point of the 1/n lattice to a simplex point (mass preserved)."""
    target = np.asarray(getattr(x, "coords", x), dtype=float) * n
    counts = np.floor(target).astype(np.int64)
    short = int(n - counts.sum())
    # distribute the missing mass to the largest fractional parts
    order = np.argsort(-(target - counts))
    for idx in order[:short]:
        counts[idx] += 1
    return LatticePoint(counts, n)


@dataclass(frozen=True)
class JumpDirection:
    """Integer displacement e_j - e_i of the scaled empirical measure."""

    delta: tuple

    def __post_init__(self):
        d = tuple(int(v) for v in self.delta)
        if sum(d) != 0:
            raise ModelError(f"direction components must sum to 0: {d}")
        object.__setattr__(self, "delta", d)

    @property
    def is_null(self):
        return all(v == 0 for v in self.delta)

    def as_array(self):
        return np.array(self.delta, dtype=float)

    def negative_support(self):
        """1-based indices i with delta_i < 0."""
        return tuple(i + 1 for i, v in enumerate(self.delta) if v < 0)

    def __repr__(self):
        return f"JumpDirection({self.delta})"


def direction_of(frm, to, d) -> JumpDirection:
    delta = [0] * d
    for i in frm:
        delta[i - 1] -= 1
    for j in to:
        delta[j - 1] += 1
    return JumpDirection(tuple(delta))


@dataclass(frozen=True)
class TupleTransition:
    """An ordered k-tuple transition ``frm -> to`` with limit rate ``rate``.

    ``n_exponent`` overrides the finite-n scaling; by default the rate at
    population n is n**(1-k) times the limit rate.
    """

    frm: tuple
    to: tuple
    rate: RateExpr
    n_exponent: int | None = None

    def __post_init__(self):
        frm = tuple(int(i) for i in self.frm)
        to = tuple(int(j) for j in self.to)
        if len(frm) != len(to) or not frm:
            raise ModelError(f"mismatched tuple lengths: {frm} -> {to}")
        for i, j in zip(frm, to):
            if i == j:
                raise ModelError(f"component {i} does not change in {frm} -> {to}")
        object.__setattr__(self, "frm", frm)
        object.__setattr__(self, "to", to)

    @property
    def k(self):
        return len(self.frm)

    def source_multiplicities(self):
        """Map state -> number of tuple slots drawn from that state."""
        out = {}
        for i in self.frm:
            out[i] = out.get(i, 0) + 1
        return out

    def permutation_class(self):
        """Distinct permuted copies (sigma(frm), sigma(to)) of this transition."""
        seen = set()
        for sigma in itertools.permutations(range(self.k)):
            seen.add(
                (
                    tuple(self.frm[s] for s in sigma),
                    tuple(self.to[s] for s in sigma),
                )
            )
        return sorted(seen)


@dataclass(frozen=True)
class ModelSpec:
    """A particle system: state count, tuple transitions, symmetrization flag.

    With ``symmetrize`` set, each listed transition stands for its whole
    permutation class (no two listed transitions may be permutations of one
    another); otherwise the listed ordered transitions are exhaustive.
    """

    space: StateSpace
    transitions: tuple
    symmetrize: bool = False
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        trs = tuple(self.transitions)
        if not trs:
            raise ModelError("a model needs at least one transition")
        d = self.space.d
        for t in trs:
            for s in t.frm + t.to:
                if not 1 <= s <= d:
                    raise ModelError(f"state {s} outside 1..{d} in {t.frm}->{t.to}")
            if t.k > 8:
                raise ModelError("tuple sizes above 8 are not supported")
        if self.symmetrize:
            seen = {}
            for idx, t in enumerate(trs):
                key = tuple(sorted(zip(t.frm, t.to)))
                if key in seen:
                    raise ModelError(
                        f"transitions {seen[key]} and {idx} are permutations "
                        "of each other but symmetrize is set"
                    )
                seen[key] = idx
        object.__setattr__(self, "transitions", trs)

    @property
    def d(self):
        return self.space.d

    @property
    def K(self):
        return max(t.k for t in self.transitions)

    def expanded(self):
        """(transition, multiplicity) pairs with symmetrization made explicit.

        The multiplicity is the size k!/|S_k[i,j]| of the permutation class,
        so summing multiplicity * (1/k!) * prod(x_frm) * rate over this list
        reproduces the fully expanded per-ordered-tuple sum.
        """
        out = []
        for t in self.transitions:
            if self.symmetrize:
                out.append((t, len(t.permutation_class())))
            else:
                out.append((t, 1))
        return out


# --- piecewise-linear simplex paths ------------------------------------------


@dataclass(frozen=True, eq=False)
class PiecewiseLinearPath:
    """A simplex-valued path, linear between knots on a strictly increasing grid."""

    times: np.ndarray
    knots: np.ndarray  # shape (len(times), d)

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        k = np.array(self.knots, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise ModelError("path needs at least one knot")
        if k.shape != (t.size, k.shape[1] if k.ndim == 2 else -1):
            raise ModelError("knots must be a (len(times), d) array")
        if np.any(np.diff(t) <= 0):
            raise ModelError("knot times must be strictly increasing")
        for row in k:
            SimplexPoint(row)  # validates
        t.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "knots", k)

    @property
    def d(self):
        return self.knots.shape[1]

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def t1(self):
        return float(self.times[-1])

    @property
    def segments(self):
        return self.times.size - 1

    def start(self) -> SimplexPoint:
        return SimplexPoint(self.knots[0])

    def end(self) -> SimplexPoint:
        return SimplexPoint(self.knots[-1])

    def evaluate(self, t):
        """Linear interpolation; clamps to the time span."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, self.d))
        for j in range(self.d):
            out[:, j] = np.interp(t, self.times, self.knots[:, j])
        return out if out.shape[0] > 1 else out[0]

    def segment_velocity(self, m):
        dt = self.times[m + 1] - self.times[m]
        return (self.knots[m + 1] - self.knots[m]) / dt

    def resample(self, new_times) -> "PiecewiseLinearPath":
        new_times = np.asarray(new_times, dtype=float)
        return PiecewiseLinearPath(new_times, np.atleast_2d(self.evaluate(new_times)))

    def shifted(self, dt) -> "PiecewiseLinearPath":
        return PiecewiseLinearPath(self.times + dt, self.knots)

    def time_scaled(self, c) -> "PiecewiseLinearPath":
        """Reparametrize s -> path(c * s); the time span shrinks by 1/c."""
        return PiecewiseLinearPath(self.times / c, self.knots)

    def concatenate(self, other: "PiecewiseLinearPath") -> "PiecewiseLinearPath":
        if not np.allclose(other.knots[0], self.knots[-1], atol=1e-9):
            raise ModelError("paths do not meet at the junction")
        shift = other.times - other.times[0] + self.times[-1]
        times = np.concatenate([self.times, shift[1:]])
        knots = np.vstack([self.knots, other.knots[1:]])
        return PiecewiseLinearPath(times, knots)


# --- model validation ---------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    """One validation failure: which check, where, and what was observed."""

    check: str
    message: str
    transition: int | None = None
    point: tuple | None = None

    def __str__(self):
        loc = ""
        if self.transition is not None:
            loc += f" [transition {self.transition}]"
        if self.point is not None:
            loc += f" at x={tuple(round(v, 6) for v in self.point)}"
        return f"{self.check}: {self.message}{loc}"


def validation_grid(d: int) -> np.ndarray:
    """Deterministic simplex grid: vertices, edge midpoints, barycenter,
    and 200 pseudo-random points from a fixed seed."""
    points = [np.eye(d)[i] for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            m = np.zeros(d)
            m[i] = m[j] = 0.5
            points.append(m)
    points.append(np.full(d, 1.0 / d))
    rng = np.random.Generator(np.random.Philox(key=GRID_SEED))
    expo = rng.exponential(size=(GRID_RANDOM_POINTS, d))
    points.extend(expo / expo.sum(axis=1, keepdims=True))
    return np.array(points)


def validate_model(spec: ModelSpec, grid=None) -> list:
    """Check every transition rate is finite and nonnegative on the grid."""
    if grid is None:
        grid = validation_grid(spec.d)
    findings = []
    for idx, t in enumerate(spec.transitions):
        bad = t.rate.free_variables() - set(range(1, spec.d + 1))
        if bad:
            findings.append(
                Finding("free-variables", f"rate references x{sorted(bad)[0]}", idx)
            )
            continue
        values = np.broadcast_to(t.rate.compiled()(grid), (len(grid),))
        finite = np.isfinite(values)
        if not finite.all():
            p = int(np.argmin(finite))
            findings.append(
                Finding("non-finite-rate", f"rate is {values[p]}", idx, tuple(grid[p]))
            )
        neg = values < -SUM_TOL
        if np.any(finite & neg):
            p = int(np.argmax(finite & neg))
            findings.append(
                Finding("negative-rate", f"rate is {values[p]}", idx, tuple(grid[p]))
            )
    return findings


# --- built-in models ----------------------------------------------------------


def _positive(params, key, default):
    value = float(params.get(key, default))
    if not value > 0:
        raise ModelError(f"parameter {key} must be positive, got {value}")
    return value


def _curie_weiss(params) -> ModelSpec:
    # states: 1 = opinion -1, 2 = opinion +1; coordinates (x_{-1}, x_{+1})
    beta = _positive(params, "beta", 1.0)
    consts = {"beta": beta}
    flip_down = parse_rate_expr(
        "cond(x2 > x1, exp(-2.0*beta*(x2 - x1)), 1.0)", consts
    )
    flip_up = parse_rate_expr(
        "cond(x1 > x2, exp(-2.0*beta*(x1 - x2)), 1.0)", consts
    )
    return ModelSpec(
        StateSpace(2),
        (
            TupleTransition((2,), (1,), flip_down),
            TupleTransition((1,), (2,), flip_up),
        ),
        symmetrize=False,
        name="curie-weiss",
        params={"beta": beta},
    )


def _arn(params) -> ModelSpec:
    # state s = occupancy s-1; full links are state C+1, coordinate x_{C+1}
    gamma = _positive(params, "gamma", 1.0)
    capacity = int(params.get("capacity", params.get("C", 2)))
    if capacity < 1:
        raise ModelError(f"capacity must be >= 1, got {capacity}")
    d = capacity + 1
    consts = {"gamma": gamma}
    full = f"x{d}"
    transitions = []
    for s in range(1, d):
        transitions.append(
            TupleTransition((s,), (s + 1,), parse_rate_expr("gamma", consts))
        )
    for s in range(2, d + 1):
        transitions.append(
            TupleTransition((s,), (s - 1,), parse_rate_expr(f"{s - 1}.0"))
        )
    pair_rate = parse_rate_expr(f"gamma * {full}", consts)
    for s in range(1, d):
        for r in range(s, d):
            transitions.append(TupleTransition((s, r), (s + 1, r + 1), pair_rate))
    return ModelSpec(
        StateSpace(d),
        tuple(transitions),
        symmetrize=True,
        name="arn",
        params={"gamma": gamma, "capacity": capacity},
    )


def _eg3(params) -> ModelSpec:
    c = [_positive(params, f"c{i}", 1.0) for i in range(1, 7)]
    mk = lambda v: parse_rate_expr(repr(v))
    transitions = (
        TupleTransition((1,), (2,), mk(c[0])),
        TupleTransition((2,), (1,), mk(c[1])),
        TupleTransition((3,), (4,), mk(c[2])),
        TupleTransition((4,), (3,), mk(c[3])),
        TupleTransition((1, 2), (3, 4), mk(c[4])),
        TupleTransition((3, 4), (1, 2), mk(c[5])),
    )
    return ModelSpec(
        StateSpace(4),
        transitions,
        symmetrize=True,
        name="eg3",
        params={f"c{i + 1}": c[i] for i in range(6)},
    )


_BUILTINS = {"curie-weiss": _curie_weiss, "arn": _arn, "eg3": _eg3}


def builtin_model(name: str, params=None) -> ModelSpec:
    """Construct one of the built-in example models.

    curie-weiss: two-opinion flip dynamics, parameter beta > 0.
    arn: loss network with alternative rerouting, parameters gamma > 0 and
      integer capacity >= 1 (d = capacity + 1 states).
    eg3: four-state system with paired transitions between the communities
      {1,2} and {3,4}, parameters c1..c6 > 0.
    """
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ModelError(
            f"unknown model {name!r}; choose from {sorted(_BUILTINS)}"
        ) from None
    return factory(dict(params or {}))


# --- config file round-trip ----------------------------------------------------

CONFIG_SCHEMA = 1


def model_from_config(doc: dict) -> ModelSpec:
    """Build a ModelSpec from the versioned JSON document format."""
    if doc.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ModelError(f"unsupported schema {doc.get('schema')!r}")
    if "builtin" in doc:
        return builtin_model(doc["builtin"], doc.get("params", {}))
    try:
        d = int(doc["d"])
        raw = doc["transitions"]
    except KeyError as e:
        raise ModelError(f"missing config field {e.args[0]!r}") from None
    params = {k: float(v) for k, v in doc.get("params", {}).items()}
    transitions = []
    for entry in raw:
        try:
            expr = parse_rate_expr(entry["rate"], params)
        except ExprError as e:
            raise ModelError(f"bad rate {entry.get('rate')!r}: {e}") from None
        transitions.append(
            TupleTransition(tuple(entry["from"]), tuple(entry["to"]), expr)
        )
        if "k" in entry and int(entry["k"]) != transitions[-1].k:
            raise ModelError(f"declared k={entry['k']} but tuple has {transitions[-1].k}")
    spec = ModelSpec(
        StateSpace(d),
        tuple(transitions),
        symmetrize=bool(doc.get("symmetrize", False)),
        name=str(doc.get("name", "")),
        params=params,
    )
    if "K" in doc and int(doc["K"]) != spec.K:
        raise ModelError(f"declared K={doc['K']} but transitions have K={spec.K}")
    return spec


def model_to_config(spec: ModelSpec) -> dict:
    return {
        "schema": CONFIG_SCHEMA,
        "d": spec.d,
        "K": spec.K,
        "transitions": [
            {"k": t.k, "from": list(t.frm), "to": list(t.to), "rate": str(t.rate)}
            for t in spec.transitions
        ],
        "symmetrize": spec.symmetrize,
        "params": dict(spec.params),
    }


def load_model_file(path) -> ModelSpec:
    with open(path) as fh:
        return model_from_config(json.load(fh))
