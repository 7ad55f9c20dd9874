"""Structural checks on a model and constructive communicating paths.

The checks classify transition rates on a fixed grid (uniformly positive /
identically zero / mixed), test reachability of every state through
positive-rate tuple transitions whose sources stay within already-visited
states, and test ergodicity of the single-transition and effective rate
matrices pointwise.

The constructions return piecewise-linear simplex paths whose segment
directions are jump directions carrying positive rates: matching two points
through single transitions, escaping a boundary neighborhood, and joining
interior points while staying well inside the simplex.  Constructed paths
report their constants (segment count, length ratio, rate floor) instead of
certifying universal ones.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import (
    JumpDirection,
    ModelError,
    ModelSpec,
    PiecewiseLinearPath,
    direction_of,
    validation_grid,
)
from .rates import build_rate_table, classify_transitions, effective_matrix

__all__ = [
    "AccessibilityClosure",
    "CommunicatingPath",
    "accessibility_closure",
    "is_k_ergodic",
    "check_single_ergodic",
    "check_ue",
    "check_simjumps",
    "solve_nonneg_linear",
    "represent_direction",
    "build_path_single_jump",
    "build_boundary_escape",
    "build_interior_path",
]

MATCH_TOL = 1e-13


# --- accessibility and ergodicity checks --------------------------------------


@dataclass(frozen=True)
class AccessibilityClosure:
    """States reachable from ``source``, with the witnessing transitions.

    ``steps`` lists (state added, transition index) in addition order; every
    witness has all its source states inside the set accumulated before it.
    """

    source: int
    steps: tuple

    def states(self):
        out = [self.source]
        out.extend(s for s, _ in self.steps)
        return out

    def covers(self, d):
        return len(self.states()) == d


def _positive_indices(spec, labels=None):
    labels = labels if labels is not None else classify_transitions(spec)
    return [i for i, lab in enumerate(labels) if lab == "positive"]


def accessibility_closure(spec: ModelSpec, u: int, labels=None) -> AccessibilityClosure:
    """Least fixed point of: add any state of a positive-rate transition's
    target tuple once the whole source tuple lies in the current set."""
    if not 1 <= u <= spec.d:
        raise ModelError(f"state {u} outside 1..{spec.d}")
    positive = _positive_indices(spec, labels)
    have = {u}
    steps = []
    changed = True
    while changed:
        changed = False
        for idx in positive:
            t = spec.transitions[idx]
            if not set(t.frm) <= have:
                continue
            for s in sorted(set(t.to) - have):
                have.add(s)
                steps.append((s, idx))
                changed = True
    return AccessibilityClosure(u, tuple(steps))


def is_k_ergodic(spec: ModelSpec):
    """True iff every state is reachable from every state; returns the
    per-source closures as certificates."""
    labels = classify_transitions(spec)
    closures = {u: accessibility_closure(spec, u, labels) for u in spec.space.states}
    ok = all(c.covers(spec.d) for c in closures.values())
    return ok, closures


def _gamma1_matrix(spec: ModelSpec, x) -> np.ndarray:
    coords = np.asarray(getattr(x, "coords", x), dtype=float)
    out = np.zeros((spec.d, spec.d))
    for t, mult in spec.expanded():
        if t.k != 1:
            continue
        out[t.frm[0] - 1, t.to[0] - 1] += mult * t.rate.evaluate(coords)
    np.fill_diagonal(out, -out.sum(axis=1))
    return out


def _strongly_connected(matrix, tol=1e-12):
    d = matrix.shape[0]
    adj = [np.nonzero(matrix[i] > tol)[0] for i in range(d)]
    radj = [np.nonzero(matrix[:, i] > tol)[0] for i in range(d)]

    def reach(adjacency):
        seen = {0}
        stack = [0]
        while stack:
            for j in adjacency[stack.pop()]:
                if j not in seen:
                    seen.add(int(j))
                    stack.append(int(j))
        return len(seen) == d

    return reach(adj) and reach(radj)


def _ergodicity_checkpoints(d: int) -> np.ndarray:
    """Face barycenters by decreasing face size, then the random grid points.

    The face barycenters realize every pattern of vanishing coordinates, which
    under the uniform-positivity classification determines the positivity
    pattern of the rate matrices for the built-in (monomial) models.
    """
    points = []
    for size in range(d, 0, -1):
        for mask in _subsets(d, size):
            p = np.zeros(d)
            p[list(mask)] = 1.0 / size
            points.append(p)
    grid = validation_grid(d)
    points.extend(grid[d + d * (d - 1) // 2 + 1 :])  # the pseudo-random tail
    return np.array(points)


def _subsets(d, size):
    import itertools

    return itertools.combinations(range(d), size)


def check_single_ergodic(spec: ModelSpec, which: str = "gamma1"):
    """Strong connectivity of the positive entries of Gamma^1 (``gamma1``) or
    of the effective matrix (``geff``) at every checkpoint.

    Returns (ok, counterexample): the first failing point, or None.
    """
    if which not in ("gamma1", "geff"):
        raise ModelError(f"which must be 'gamma1' or 'geff', got {which!r}")
    for x in _ergodicity_checkpoints(spec.d):
        m = _gamma1_matrix(spec, x) if which == "gamma1" else effective_matrix(spec, x)
        if not _strongly_connected(m):
            return False, tuple(float(v) for v in x)
    return True, None


def check_ue(spec: ModelSpec):
    """Each transition rate must be identically zero or uniformly positive."""
    labels = classify_transitions(spec)
    findings = [
        (idx, str(spec.transitions[idx].rate))
        for idx, lab in enumerate(labels)
        if lab == "mixed"
    ]
    return not findings, findings


def check_simjumps(spec: ModelSpec):
    """Check the simultaneous-jump restriction per direction.

    For each direction v with a non-vanishing rate, property 1 holds if some
    positive transition's source multiplicities are exactly |v_i| on the
    negative support and zero elsewhere; property 2 holds if all positive
    transitions for v share one source profile supported on the negative
    support.  Returns (ok, per-direction diagnosis).
    """
    table = build_rate_table(spec)
    diagnosis = {}
    ok = True
    for ns in table.negative_supports():
        v = ns.direction
        exact = {i: -v.delta[i - 1] for i in ns.indices}
        profiles = list(ns.profiles)
        prop1 = any(p == exact for p in profiles)
        prop2 = bool(profiles) and all(p == profiles[0] for p in profiles) and set(
            profiles[0]
        ) <= set(ns.indices)
        diagnosis[v.delta] = {
            "property1": prop1,
            "property2": prop2,
            "profiles": profiles,
        }
        if profiles and not (prop1 or prop2):
            ok = False
    return ok, diagnosis


# --- linear algebra helper -----------------------------------------------------


def solve_nonneg_linear(C, y, condition: str = "rows") -> np.ndarray:
    """Solve (I - C) x = y for nonnegative C with zero diagonal and sub-unit
    row sums (or column sums with ``condition='columns'``); the solution is
    unique and nonnegative for nonnegative y."""
    C = np.asarray(C, dtype=float)
    y = np.asarray(y, dtype=float)
    n = C.shape[0]
    if C.shape != (n, n) or y.shape != (n,):
        raise ModelError("C must be square and y of matching length")
    if np.any(C < 0) or np.any(np.abs(np.diag(C)) > 0):
        raise ModelError("C must be nonnegative with zero diagonal")
    if np.any(y < 0):
        raise ModelError("y must be nonnegative")
    sums = C.sum(axis=1) if condition == "rows" else C.sum(axis=0)
    if np.any(sums >= 1.0):
        raise ModelError(
            f"{condition[:-1]} sum {float(sums.max())} >= 1; spectral condition fails"
        )
    x = np.linalg.solve(np.eye(n) - C, y)
    residual = np.abs((np.eye(n) - C) @ x - y).max()
    if residual > 1e-12:
        raise ModelError(f"linear solve residual {residual}")
    if np.min(x) < -1e-12:
        raise ModelError(f"solution has negative component {x.min()}")
    return np.maximum(x, 0.0)


# --- direction representation (mass routing through positive transitions) ------


def _sequence_to(spec, closure, target):
    """K-accessibility sequence from the closure source to ``target``:
    the addition order cut at the target, with aligned witness transitions."""
    seq = [closure.source]
    witnesses = []
    for s, idx in closure.steps:
        seq.append(s)
        witnesses.append(spec.transitions[idx])
        if s == target:
            return seq, witnesses
    raise ModelError(f"state {target} not reachable from {closure.source}")


def _routing_coefficients(spec, seq, witnesses):
    """Positive weights b_m on the witnesses such that the weighted direction
    sum drains the sequence start and deposits nonnegative mass elsewhere."""
    M = len(seq)
    K = spec.K
    b = [0.0] * (M - 1)
    b[M - 2] = 1.0
    for m in range(M - 3, -1, -1):
        kappa = witnesses[m].to.count(seq[m + 1]) / witnesses[m].k
        b[m] = K * sum(b[m + 1 :]) / kappa
    combo = np.zeros(spec.d)
    for weight, t in zip(b, witnesses):
        combo += weight * direction_of(t.frm, t.to, spec.d).as_array()
    return np.array(b), combo


def represent_direction(spec: ModelSpec, u: int, w: int):
    """Express e_w - e_u as a nonnegative combination of positive-rate
    transition directions.

    Returns a list of (transition, coefficient) with coefficient > 0 whose
    weighted directions sum to e_w - e_u (residual <= 1e-10).
    """
    if u == w:
        raise ModelError("u and w must differ")
    ok, closures = is_k_ergodic(spec)
    if not ok:
        raise ModelError("model is not K-ergodic; direction routing unavailable")
    d = spec.d
    others = [s for s in spec.space.states if s != w]
    index = {s: i for i, s in enumerate(others)}
    weights = {}  # state s -> (b vector, witnesses)
    C = np.zeros((d - 1, d - 1))
    for s in others:
        seq, wits = _sequence_to(spec, closures[s], w)
        b, combo = _routing_coefficients(spec, seq, wits)
        scale = float(combo[[t - 1 for t in others if t != s]].sum() + combo[w - 1])
        if scale <= 0:
            raise ModelError(f"routing from {s} deposits no mass")
        b = b / scale
        combo = combo / scale
        weights[s] = (b, wits)
        for i in others:
            if i != s:
                C[index[i], index[s]] = max(float(combo[i - 1]), 0.0)
    y = np.zeros(d - 1)
    y[index[u]] = 1.0
    theta = solve_nonneg_linear(C, y, condition="columns")
    coeffs = {}
    for s in others:
        b, wits = weights[s]
        for weight, t in zip(b, wits):
            amount = float(theta[index[s]] * weight)
            if amount > 0:
                coeffs[id(t)] = (t, coeffs.get(id(t), (t, 0.0))[1] + amount)
    result = [(t, a) for t, a in coeffs.values() if a > 0]
    combo = sum(a * direction_of(t.frm, t.to, d).as_array() for t, a in result)
    target = np.zeros(d)
    target[w - 1], target[u - 1] = 1.0, -1.0
    residual = float(np.abs(combo - target).max())
    if residual > 1e-10:
        raise ModelError(f"direction representation residual {residual}")
    return result


# --- communicating paths --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CommunicatingPath:
    """A piecewise-linear simplex path with one jump direction per segment.

    ``directions[m]`` and ``speeds[m]`` give the segment derivative
    speeds[m] * directions[m].  ``constants`` reports the construction's
    diagnostics (segment count, length ratio, rate floor and exponents).
    """

    path: PiecewiseLinearPath
    directions: tuple
    speeds: tuple
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.directions) != self.path.segments or len(self.speeds) != len(
            self.directions
        ):
            raise ModelError("one direction and speed per segment required")
        for m, (v, U) in enumerate(zip(self.directions, self.speeds)):
            vel = self.path.segment_velocity(m)
            if np.abs(vel - U * v.as_array()).max() > 1e-9:
                raise ModelError(f"segment {m} derivative is not U*v")

    @property
    def segments(self):
        return self.path.segments

    def endpoint_error(self, y):
        y = np.asarray(getattr(y, "coords", y), dtype=float)
        return float(np.abs(self.path.knots[-1] - y).max())

    def displacement_residual(self):
        """Telescoping check: sum of U_m v_m dt_m minus (end - start)."""
        total = np.zeros(self.path.d)
        for m, (v, U) in enumerate(zip(self.directions, self.speeds)):
            dt = self.path.times[m + 1] - self.path.times[m]
            total += U * dt * v.as_array()
        return float(np.abs(total - (self.path.knots[-1] - self.path.knots[0])).max())


def _assemble_path(x0, legs, constants):
    """Build a CommunicatingPath from unit-speed legs (direction, duration).

    If the natural duration exceeds 1 the whole path is sped up uniformly so
    it fits in [0, 1] (communicating paths live on a horizon of at most 1).
    """
    x0 = np.asarray(getattr(x0, "coords", x0), dtype=float)
    legs = [(v, dt) for v, dt in legs if dt > 0]
    if not legs:
        path = PiecewiseLinearPath(np.array([0.0]), x0[None, :])
        return CommunicatingPath(path, (), (), dict(constants, segments=0, length=0.0))
    total = sum(dt for _, dt in legs)
    speed = max(total, 1.0)
    times = [0.0]
    knots = [x0]
    for v, dt in legs:
        times.append(times[-1] + dt / speed)
        knots.append(knots[-1] + dt * v.as_array())
    length = sum(dt * np.linalg.norm(v.as_array()) for v, dt in legs)
    path = PiecewiseLinearPath(np.array(times), np.array(knots))
    return CommunicatingPath(
        path,
        tuple(v for v, _ in legs),
        tuple(speed for _ in legs),
        dict(constants, segments=len(legs), length=float(length)),
    )


def _positive_single_edges(spec, labels=None):
    labels = labels if labels is not None else classify_transitions(spec)
    edges = {}
    for idx, t in enumerate(spec.transitions):
        if t.k == 1 and labels[idx] == "positive":
            edges.setdefault(t.frm[0], set()).add(t.to[0])
    return edges


def build_path_single_jump(spec: ModelSpec, x, y, n: int | None = None):
    """Connect x to y through single-transition directions only.

    Matches coordinates one at a time: the current worst donor state sends its
    excess mass along a chain of positive-rate single transitions whose first
    exit leaves the already-matched set.  Requires Gamma^1 to be ergodic.
    For lattice x, y (population ``n``) all leg masses are multiples of 1/n,
    so the path also defines a discrete lattice walk.
    """
    labels = classify_transitions(spec)
    ok, counter = check_single_ergodic(spec, "gamma1")
    if not ok:
        raise ModelError(f"Gamma^1 not ergodic (fails at x={counter})")
    edges = _positive_single_edges(spec, labels)
    x0 = np.asarray(getattr(x, "coords", x), dtype=float)
    target = np.asarray(getattr(y, "coords", y), dtype=float)
    z = x0.copy()
    d = z.size
    legs = []
    for _ in range(d + 1):
        diff = z - target
        if np.abs(diff).max() <= MATCH_TOL:
            break
        matched = {i + 1 for i in range(d) if abs(diff[i]) <= MATCH_TOL}
        donor = int(np.argmax(diff)) + 1
        chain = _first_exit_chain(edges, donor, matched | {donor}, d)
        delta = float(diff[donor - 1])
        for a, b in zip(chain, chain[1:]):
            v = direction_of((a,), (b,), d)
            legs.append((v, delta))
            z = z + delta * v.as_array()
    else:
        raise ModelError("coordinate matching did not terminate")
    table = build_rate_table(spec)
    constants = {
        "rate_floor": table.positive_rate_floor(),
        "rate_exponent": 1,
        "length_ratio": _length_ratio(legs, x0, target),
    }
    cp = _assemble_path(x0, legs, constants)
    if cp.endpoint_error(target) > 1e-10:
        raise ModelError("path endpoint mismatch")
    if n is not None:
        _check_lattice_legs(legs, n)
    return cp


def _first_exit_chain(edges, start, inside, d):
    """BFS chain from ``start`` whose interior stays in ``inside`` and whose
    last state is the first reachable state outside it."""
    parent = {start: None}
    queue = deque([start])
    while queue:
        a = queue.popleft()
        for b in sorted(edges.get(a, ())):
            if b in parent:
                continue
            parent[b] = a
            if b not in inside:
                chain = [b]
                while chain[-1] is not None:
                    chain.append(parent[chain[-1]])
                return list(reversed(chain[:-1]))
            queue.append(b)
    raise ModelError(f"no positive single-transition chain leaves {sorted(inside)}")


def _length_ratio(legs, x0, y):
    dist = float(np.linalg.norm(x0 - y))
    if dist == 0:
        return 0.0
    length = sum(dt * np.linalg.norm(v.as_array()) for v, dt in legs)
    return float(length / dist)


def _check_lattice_legs(legs, n):
    for v, dt in legs:
        steps = dt * n
        if abs(steps - round(steps)) > 1e-7:
            raise ModelError("leg mass is not a multiple of 1/n")


def escape_level_cap(spec: ModelSpec) -> float:
    """Largest admissible interior margin for build_boundary_escape."""
    return 1.0 / ((spec.K + 1) ** (spec.d - 1) * spec.d)


def build_boundary_escape(spec: ModelSpec, x, a: float):
    """Drive every coordinate up to at least ``a`` along accessibility
    witnesses, never letting a decreasing coordinate drop below ``a``.

    Stagewise: from the currently largest coordinate, walk the accessibility
    order until the first ``a``-deficient state and top it up with the
    standard geometric schedule; repeat until the point lies in the target
    set.  Requires K-ergodicity and 0 < a <= 1/((K+1)^(d-1) d).
    """
    ok, closures = is_k_ergodic(spec)
    if not ok:
        raise ModelError("model is not K-ergodic")
    cap = escape_level_cap(spec)
    if not 0 < a <= cap:
        raise ModelError(f"need 0 < a <= {cap}, got {a}")
    x0 = np.asarray(getattr(x, "coords", x), dtype=float)
    z = x0.copy()
    d, K = spec.d, spec.K
    legs = []
    for _ in range(d + 1):
        if z.min() >= a - 1e-15:
            break
        top = int(np.argmax(z)) + 1
        closure = closures[top]
        seq = [top] + [s for s, _ in closure.steps]
        wits = [spec.transitions[idx] for _, idx in closure.steps]
        m_bar = next(
            (m for m in range(1, len(seq)) if z[seq[m] - 1] < a - 1e-15), None
        )
        if m_bar is None:
            raise ModelError("no deficient state on the accessibility order")
        h = a - z[seq[m_bar] - 1]
        # geometric schedule: long early pushes protect the mass the later
        # simultaneous transitions will draw down
        for m in range(1, m_bar + 1):
            if m < m_bar:
                dt = K * (K + 1.0) ** (m_bar - 1 - m) * h
            else:
                dt = h
            t = wits[m - 1]
            v = direction_of(t.frm, t.to, d)
            legs.append((v, dt))
            z = z + dt * v.as_array()
        if np.min(z) < -1e-12:
            raise ModelError("escape construction left the simplex")
    else:
        raise ModelError("boundary escape did not terminate")
    table = build_rate_table(spec)
    dist_lb = max(float(a - x0.min()), 0.0)
    constants = {
        "rate_floor": table.positive_rate_floor() / _fact(K),
        "rate_exponent": d,
        "level": a,
        "length_ratio": (
            _length_ratio(legs, x0, z) * np.linalg.norm(x0 - z) / dist_lb
            if dist_lb > 0
            else 0.0
        ),
    }
    return _assemble_path(x0, legs, constants)


def _fact(k):
    out = 1
    for i in range(2, k + 1):
        out *= i
    return out


def build_interior_path(spec: ModelSpec, x, y, a: float):
    """Join two points of the ``a``-interior while staying in the
    ``a/2``-interior.

    First builds the greedy coordinate polyline from x to y (each leg moves
    excess mass of one state directly to a deficient one, staying in the
    ``a``-interior), then replays each leg through the positive-transition
    routing of represent_direction, subdividing until the deviation from the
    straight polyline is at most a/2.
    """
    x0 = np.asarray(getattr(x, "coords", x), dtype=float)
    target = np.asarray(getattr(y, "coords", y), dtype=float)
    if x0.min() < a - 1e-12 or target.min() < a - 1e-12:
        raise ModelError(f"both endpoints must lie in the {a}-interior")
    ok, _ = is_k_ergodic(spec)
    if not ok:
        raise ModelError("model is not K-ergodic")
    d = spec.d
    # greedy coordinate polyline
    z = x0.copy()
    coarse = []
    for _ in range(2 * d + 1):
        diff = z - target
        if np.abs(diff).max() <= MATCH_TOL:
            break
        i = int(np.argmax(diff))
        j = int(np.argmin(diff))
        move = min(diff[i], -diff[j])
        coarse.append((i + 1, j + 1, float(move)))
        z[i] -= move
        z[j] += move
    else:
        raise ModelError("polyline construction did not terminate")
    routing = {}
    legs = []
    for i, j, move in coarse:
        if (i, j) not in routing:
            routing[(i, j)] = represent_direction(spec, i, j)
        decomp = routing[(i, j)]
        dirs = [direction_of(t.frm, t.to, d) for t, _ in decomp]
        cycle_len = move * sum(
            c * np.linalg.norm(v.as_array()) for (t, c), v in zip(decomp, dirs)
        )
        parts = max(1, int(np.ceil(cycle_len / (0.45 * a))))
        for _ in range(parts):
            for (t, c), v in zip(decomp, dirs):
                legs.append((v, c * move / parts))
    table = build_rate_table(spec)
    constants = {
        "rate_floor": table.positive_rate_floor() * (a / 2.0) ** d / _fact(spec.K),
        "rate_exponent": d,
        "level": a / 2.0,
        "length_ratio": _length_ratio(legs, x0, target),
    }
    cp = _assemble_path(x0, legs, constants)
    if cp.endpoint_error(target) > 1e-10:
        raise ModelError("interior path endpoint mismatch")
    if cp.path.knots.min() < a / 2.0 - 1e-9:
        raise ModelError("interior path left the a/2-interior")
    return cp
