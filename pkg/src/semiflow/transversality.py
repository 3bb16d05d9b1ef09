"""Cone field, block Jacobians, transversal preimages and cohomology detection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import qmc
from sklearn.base import BaseEstimator

from ._validation import as_points, check_positive, check_random_state
from .errors import PreconditionError
from .holder import PiecewiseField
from .phase_space import (DEFAULT_WORD_BUDGET, _as_word, _check_in_image, _inv, _matmul, _rowmat,
                          preimages, reduce_preimages, system_constants)

MARGIN = 1e-9
DEFAULT_TOL = 1e-6
DEAD_ZONE = 10.0


# ---------------------------------------------------------------------------
# cones and block Jacobians
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cone:
    """``K = {(a, b) : |b| <= width |a|}``."""

    width: float

    def __post_init__(self):
        check_positive(self.width, "cone width")

    def contains(self, a, b):
        a = np.atleast_1d(np.asarray(a, float))
        return abs(float(b)) <= self.width * float(np.linalg.norm(a))


@dataclass(frozen=True, eq=False)
class BlockJacobian:
    """``[[DT^n(x), 0], [D tau_n(x), 1]]`` at the base point ``x``."""

    DTn: np.ndarray
    Dtau: np.ndarray
    x: np.ndarray
    n: int

    @property
    def matrix(self):
        d = self.DTn.shape[0]
        m = np.zeros((d + 1, d + 1))
        m[:d, :d] = self.DTn
        m[d, :d] = self.Dtau
        m[d, d] = 1.0
        return m

    @property
    def inverse_derivative(self):
        """``A = DT^n(x)^-1``."""
        return np.linalg.inv(self.DTn)

    @property
    def slope(self):
        """``s = D tau_n(x) DT^n(x)^-1``, the flow-direction slope seen from the image point."""
        return self.Dtau @ self.inverse_derivative

    def __matmul__(self, other):
        """Cocycle composition ``self @ other = D^m(T^n x) D^n(x)``."""
        m = self.matrix @ other.matrix
        d = self.DTn.shape[0]
        return BlockJacobian(m[:d, :d], m[d, :d], other.x, self.n + other.n)


def block_jacobian(tmap, roof, word, y):
    """Block Jacobian at ``x = ell_word(y)`` from the inverse-branch chain rule."""
    w = _as_word(word, tmap)
    y = as_points(y, tmap.d).reshape(tmap.d)
    _check_in_image(tmap, w.letters[0], y)
    x = y[None]
    dl = np.eye(tmap.d)[None]
    dtau_l = np.zeros((1, tmap.d))
    for c in w.letters:
        x = tmap.branches[c].solve(x)
        dl = _matmul(_inv(tmap.branches[c].jacobian(x)), dl)
        dtau_l = dtau_l + _rowmat(roof.derivative(x, np.full(1, c)), dl)
    DTn = np.linalg.inv(dl[0])
    return BlockJacobian(DTn, dtau_l[0] @ DTn, x[0], len(w))


def forward_block_jacobian(tmap, roof, x, n):
    """Block Jacobian along the forward orbit of ``x`` (element of each iterate by lookup)."""
    x = as_points(x, tmap.d).reshape(1, tmap.d)
    x0 = x[0].copy()
    DTn = np.eye(tmap.d)
    Dtau = np.zeros(tmap.d)
    for _ in range(n):
        e = tmap.element_of(x)
        jac = tmap.jacobian(x, e)[0]
        Dtau = Dtau + roof.derivative(x, e)[0] @ DTn
        DTn = jac @ DTn
        x = tmap.forward(x, e)
    return BlockJacobian(DTn, Dtau, x0, n)


# ---------------------------------------------------------------------------
# transversality
# ---------------------------------------------------------------------------

def transversal_1d(s1, A1, s2, A2, C5):
    """``|s1 - s2| > C5 (|A1| + |A2|)`` with a relative margin; vectorized."""
    gap = np.abs(s1 - s2) - C5 * (np.abs(A1) + np.abs(A2))
    scale = C5 * (np.abs(A1) + np.abs(A2)) + np.abs(s1) + np.abs(s2)
    return gap > MARGIN * scale


def _circle_max(fn, sweep=720):
    phi = np.linspace(0.0, np.pi, sweep, endpoint=False)
    vals = fn(phi)
    i = int(np.argmax(vals))
    step = np.pi / sweep
    res = minimize_scalar(lambda p: -float(fn(np.array([p]))[0]), bracket=None,
                          bounds=(phi[i] - step, phi[i] + step), method="bounded",
                          options={"xatol": 1e-12})
    return max(float(vals[i]), -float(res.fun))


def transversality_gap(s1, A1, s2, A2, C5):
    """``max_v |(s1 - s2) v| - C5(|A1 v| + |A2 v|)`` over unit ``v`` and the matching scale."""
    s1, s2 = np.atleast_1d(s1), np.atleast_1d(s2)
    A1, A2 = np.atleast_2d(A1), np.atleast_2d(A2)
    if s1.size == 1:
        gap = abs(s1[0] - s2[0]) - C5 * (abs(A1[0, 0]) + abs(A2[0, 0]))
        return gap, C5 * (abs(A1[0, 0]) + abs(A2[0, 0])) + abs(s1[0]) + abs(s2[0])

    def fn(phi):
        v = np.stack([np.cos(phi), np.sin(phi)], -1)
        return (np.abs(v @ (s1 - s2)) - C5 * (np.linalg.norm(v @ A1.T, axis=-1)
                                             + np.linalg.norm(v @ A2.T, axis=-1)))

    scale = C5 * (np.linalg.norm(A1, 2) + np.linalg.norm(A2, 2)) + np.linalg.norm(s1) + np.linalg.norm(s2)
    return _circle_max(fn), scale


def cones_transversal(D1: BlockJacobian, D2: BlockJacobian, C5):
    """True when the image cones ``D1 K`` and ``D2 K`` share no d-dimensional subspace.

    d=1 uses the exact scalar test; d=2 maximizes the gap over unit
    directions (720-point sweep plus bounded refinement).  Ties and gaps
    below the relative margin ``1e-9`` count as non-transversal.
    """
    if D1.n != D2.n:
        raise PreconditionError("block Jacobians must share the iterate length")
    gap, scale = transversality_gap(D1.slope, D1.inverse_derivative, D2.slope, D2.inverse_derivative, C5)
    return bool(gap > MARGIN * scale)


def _transversal_matrix(s, A, i0, C5):
    """Row ``i0`` of the pairwise transversality relation for preimages with slopes ``s`` and ``A``."""
    if s.shape[-1] == 1:
        return transversal_1d(s[:, 0], A[:, 0, 0], s[i0, 0], A[i0, 0, 0], C5)
    out = np.zeros(s.shape[0], dtype=bool)
    for j in range(s.shape[0]):
        if j != i0:
            gap, scale = transversality_gap(s[j], A[j], s[i0], A[i0], C5)
            out[j] = gap > MARGIN * scale
    return out


# ---------------------------------------------------------------------------
# mass sums
# ---------------------------------------------------------------------------

def _default_ys(tmap, per_element=1):
    pts = []
    for br in tmap.branches:
        t = (np.arange(per_element) + 0.5) / per_element
        if tmap.d == 1:
            pts.append(br.lo + t[:, None] * (br.hi - br.lo))
        else:
            g = np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
            pts.append(br.lo + g * (br.hi - br.lo))
    return np.concatenate(pts)


def phi_sum(tmap, roof, n, y, x0=None, density: Optional[PiecewiseField] = None, constants=None,
            word_budget=DEFAULT_WORD_BUDGET):
    """Jacobian mass of the preimages of ``y`` whose image cones are not transversal to that of ``x0``.

    Parameters
    ----------
    x0 : BranchWord, sequence, int or None
        Reference preimage, as a word or as an index into the lexicographic
        list of preimages.  ``None`` returns the maximum over all references.
    density : PiecewiseField, optional
        If given, ``J_n(x)`` is weighted by ``h(x) / h(y)``.
    """
    const = system_constants(tmap, roof) if constants is None else constants
    y = as_points(y, tmap.d).reshape(1, tmap.d)
    blk = preimages(tmap, roof, y, n, derivatives=True) if tmap.count_words(n) <= word_budget else None
    if blk is None:
        from .errors import ResourceError
        raise ResourceError(f"{tmap.count_words(n)} words exceed the budget {word_budget}")
    keep = blk.valid[:, 0]
    words = blk.words[keep]
    J = np.exp(blk.log_jac[keep, 0])
    if density is not None:
        J = J * density.evaluate(blk.x[keep, 0], words[:, -1]) / density.evaluate(y)[0]
    s = blk.dtau[keep, 0]
    A = blk.dl[keep, 0]
    C5 = const.C5
    if x0 is None:
        refs = range(len(words))
    elif np.ndim(x0) == 0 and not hasattr(x0, "letters"):
        refs = [int(x0)]
    else:
        letters = np.asarray(getattr(x0, "letters", x0))
        hit = np.nonzero(np.all(words == letters[None], axis=1))[0]
        if hit.size == 0:
            raise PreconditionError("x0 is not a preimage of y under an admissible word")
        refs = [int(hit[0])]
    best = 0.0
    for i0 in refs:
        tr = _transversal_matrix(s, A, i0, C5)
        best = max(best, float(J[~tr].sum()))
    return best


def phi_sequence(tmap, roof, n_values, ys=None, density=None, constants=None):
    """``phi(n) = max_{y, x0} phi_sum`` over the sample points ``ys`` (default: element midpoints)."""
    ys = _default_ys(tmap) if ys is None else as_points(ys, tmap.d).reshape(-1, tmap.d)
    return np.array([max(phi_sum(tmap, roof, n, y, None, density, constants) for y in ys) for n in n_values])


def decay_slope(n_values, values):
    """Least-squares slope of ``log values`` against ``n``."""
    v = np.asarray(values, float)
    if np.any(v <= 0):
        return float("-inf")
    return float(np.polyfit(np.asarray(n_values, float), np.log(v), 1)[0])


def varphi_sum(tmap, roof, n, y, P, density: Optional[PiecewiseField] = None, constants=None):
    """``sum J_n(x) h(x)/h(y)`` over preimages whose image cone contains the plane of slope ``P``.

    The plane ``{(v, P v)}`` lies in ``D^n(x) K`` when ``|(P - s) v| < C5 |A v|``
    for every unit ``v``; the test is strict with relative margin ``1e-9``.
    Without ``density`` the weight is ``J_n`` alone.
    """
    const = system_constants(tmap, roof) if constants is None else constants
    C5 = const.cone_width
    y = as_points(y, tmap.d).reshape(1, tmap.d)
    P = np.atleast_1d(np.asarray(P, float))
    blk = preimages(tmap, roof, y, n, derivatives=True)
    keep = blk.valid[:, 0]
    w = _mass_weights(blk, keep, y, density)
    s = blk.dtau[keep, 0]
    A = blk.dl[keep, 0]
    inside = np.array([_contains(P, s[j], A[j], C5) for j in range(s.shape[0])])
    return float(w[inside].sum())


def _mass_weights(blk, keep, y, density):
    w = np.exp(blk.log_jac[keep, 0])
    if density is not None:
        w = w * density.evaluate(blk.x[keep, 0], blk.words[keep, -1]) / density.evaluate(y)[0]
    return w


def _contains(P, s, A, C5):
    if P.size == 1:
        room = C5 * abs(A[0, 0])
        return abs(P[0] - s[0]) < room - MARGIN * (room + abs(P[0]) + abs(s[0]))

    def fn(phi):
        v = np.stack([np.cos(phi), np.sin(phi)], -1)
        return np.abs(v @ (P - s)) - C5 * np.linalg.norm(v @ A.T, axis=-1)

    worst = _circle_max(fn)
    return worst < -MARGIN * (C5 * np.linalg.norm(A, 2) + np.linalg.norm(P) + np.linalg.norm(s))


def varphi_sup(tmap, roof, n, ys=None, density=None, constants=None, p_grid=None):
    """``sup_{P, y} varphi(n, P, y)`` with ``|P| <= C5``.

    In d=1 the supremum over ``P`` is exact: containment holds on open
    slope intervals, so a sweep over interval endpoints finds the maximal
    overlapping weight.  In d=2 ``P`` ranges over ``p_grid`` (default a
    21 x 21 grid of the disc ``|P| <= C5``).
    """
    const = system_constants(tmap, roof) if constants is None else constants
    C5 = const.cone_width
    ys = _default_ys(tmap) if ys is None else as_points(ys, tmap.d).reshape(-1, tmap.d)
    best = 0.0
    for y in ys:
        y = y[None]
        blk = preimages(tmap, roof, y, n, derivatives=True)
        keep = blk.valid[:, 0]
        w = _mass_weights(blk, keep, y, density)
        s = blk.dtau[keep, 0]
        A = blk.dl[keep, 0]
        if tmap.d == 1:
            best = max(best, _interval_sweep(s[:, 0], C5 * np.abs(A[:, 0, 0]), w, C5))
        else:
            grid = p_grid
            if grid is None:
                t = np.linspace(-C5, C5, 21)
                grid = np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
                grid = grid[np.linalg.norm(grid, axis=1) <= C5]
            for P in grid:
                inside = np.array([_contains(P, s[j], A[j], C5) for j in range(s.shape[0])])
                best = max(best, float(w[inside].sum()))
    return best


def _interval_sweep(center, radius, weight, C5):
    """Largest total weight of open intervals ``(c - r, c + r)`` sharing a point of ``[-C5, C5]``."""
    shrink = radius * (1 - MARGIN) - MARGIN * np.abs(center)
    lo, hi = center - shrink, center + shrink
    ok = hi > lo
    lo, hi, weight = lo[ok], hi[ok], weight[ok]
    if lo.size == 0:
        return 0.0
    cuts = np.unique(np.concatenate([lo, hi, [-C5, C5]]))
    probes = np.concatenate([0.5 * (cuts[1:] + cuts[:-1]), cuts])
    probes = probes[np.abs(probes) <= C5]
    inside = (probes[:, None] > lo[None]) & (probes[:, None] < hi[None])
    return float(np.max(inside.astype(float) @ weight, initial=0.0))


# ---------------------------------------------------------------------------
# the Omega series
# ---------------------------------------------------------------------------

def _policy_letters(policy, rng):
    """Letter chooser ``(previous letter, allowed letters) -> letter`` for a named policy."""
    if policy.startswith("all-"):
        k = int(policy[4:])
        return lambda prev, allowed: k
    if policy == "lowest":
        return lambda prev, allowed: int(allowed[0])
    if policy == "highest":
        return lambda prev, allowed: int(allowed[-1])
    if policy == "random":
        return lambda prev, allowed: int(rng.choice(allowed))
    raise PreconditionError(f"unknown branch policy {policy!r}")


def branch_sequence(tmap, x_elem, policy, length, seed=0, then="lowest"):
    """Admissible letters ``omega_1, omega_2, ...`` for a point in element ``x_elem``.

    ``policy`` is ``"all-k"``, ``"lowest"``, ``"highest"``, ``"random"`` or an
    explicit prefix word continued by the policy ``then``.
    """
    rng = check_random_state(seed)
    out = []
    prefix = [] if isinstance(policy, str) else [int(c) for c in policy]
    rule = policy if isinstance(policy, str) else then
    picker = _policy_letters(rule, rng)
    prev = None
    for k in range(length):
        allowed = np.nonzero(tmap.transitions[:, x_elem])[0] if prev is None else np.nonzero(tmap.successor[prev])[0]
        c = prefix[k] if k < len(prefix) else picker(prev, allowed)
        if c not in allowed:
            raise PreconditionError(f"branch sequence letter {c} is not admissible at step {k + 1}")
        out.append(c)
        prev = c
    return out


def omega_depth(constants, tol):
    """Least ``k`` with ``C3 e^{-lambda k} / (1 - e^{-lambda}) < tol``."""
    C3, lam = constants.C3, constants.lam
    if C3 == 0:
        return 1
    return max(1, math.ceil(math.log(C3 / ((1 - math.exp(-lam)) * tol)) / lam) + 1)


@dataclass(frozen=True)
class OmegaResult:
    value: np.ndarray
    depth: int
    tail_bound: float
    letters: tuple


def omega_limit(tmap, roof, x, policy="lowest", tol=1e-12, seed=0, constants=None):
    """``Omega(x) = sum_k D(tau o G_k)(x)`` along the branch sequence chosen by ``policy``.

    The sum stops once the tail bound ``C3 e^{-lambda k}/(1 - e^{-lambda})``
    drops below ``tol``.
    """
    const = system_constants(tmap, roof) if constants is None else constants
    check_positive(tol, "tol")
    x = as_points(x, tmap.d).reshape(1, tmap.d)
    depth = omega_depth(const, tol)
    letters = branch_sequence(tmap, int(tmap.element_of(x)[0]), policy, depth, seed)
    total = np.zeros(tmap.d)
    dg = np.eye(tmap.d)[None]
    p = x
    for c in letters:
        p = tmap.branches[c].solve(p)
        dg = _matmul(_inv(tmap.branches[c].jacobian(p)), dg)
        total = total + _rowmat(roof.derivative(p, np.full(1, c)), dg)[0]
    tail = const.C3 * math.exp(-const.lam * depth) / (1 - math.exp(-const.lam))
    return OmegaResult(total, depth, tail, tuple(letters))


# ---------------------------------------------------------------------------
# cohomology detection
# ---------------------------------------------------------------------------

@dataclass
class CohomologyVerdict:
    """Outcome of the cohomology test; ``inconclusive`` is a value, not an error."""

    verdict: str
    tol: float
    omega_discrepancy: float
    residual: Optional[float] = None
    chi: Optional[np.ndarray] = None
    theta: Optional[PiecewiseField] = None
    chi_all_equal: Optional[bool] = None
    phi_n: list = field(default_factory=list)
    phi_values: list = field(default_factory=list)
    phi_slope: Optional[float] = None

    def summary(self):
        return {
            "verdict": self.verdict, "tol": self.tol, "omega_discrepancy": self.omega_discrepancy,
            "residual": self.residual,
            "chi": None if self.chi is None else [float(c) for c in self.chi],
            "chi_all_equal": self.chi_all_equal,
            "phi_n": list(self.phi_n), "phi_values": [float(v) for v in self.phi_values],
            "phi_slope": self.phi_slope,
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _sample_points(tmap, count):
    if tmap.d == 1:
        u = ((np.arange(count) + 0.5) / count)[:, None]
    else:
        u = qmc.Halton(tmap.d, scramble=False).random(count + 1)[1:]
    return tmap.lo + u * (tmap.hi - tmap.lo)


def _theta_series(tmap, roof, pts, elems, x0, letters):
    """``sum_k tau(G_k x) - tau(G_k x0)`` for all points, sharing one branch sequence."""
    total = np.zeros(pts.shape[0])
    p, q = pts, x0
    for c in letters:
        p = tmap.branches[c].solve(p)
        q = tmap.branches[c].solve(q)
        e = np.full(p.shape[0], c)
        total = total + roof.value(p, e) - roof.value(q, np.full(1, c))
    return total


def cohomology_detect(tmap, roof, tol=DEFAULT_TOL, n_samples=50, residual_grid=256, phi_n=tuple(range(4, 11)),
                      constants=None, seed=0):
    """Decide whether ``tau = theta o T - theta + chi`` with ``chi`` constant per element.

    Step 1 compares ``Omega`` under the ``lowest`` and ``highest`` branch
    policies at ``n_samples`` points; a discrepancy above ``10 tol`` yields
    ``not_cohomologous`` with the decay of ``phi(n)`` attached.  Otherwise
    ``theta`` is built from its series (reference point: midpoint of the
    first element) and the residual ``r = tau + theta - theta o T`` is tested
    for being constant on every element: ``sup |Dr| < tol`` gives
    ``cohomologous`` with ``chi`` the element means of ``r``; anything else
    is ``inconclusive``.
    """
    check_positive(tol, "tol")
    const = system_constants(tmap, roof) if constants is None else constants
    xs = _sample_points(tmap, n_samples)
    omega_tol = tol * 1e-3
    disc = 0.0
    for x in xs:
        lo = omega_limit(tmap, roof, x, "lowest", omega_tol, seed, const).value
        hi = omega_limit(tmap, roof, x, "highest", omega_tol, seed, const).value
        disc = max(disc, float(np.linalg.norm(lo - hi)))
    if disc > DEAD_ZONE * tol:
        phis = phi_sequence(tmap, roof, phi_n, constants=const) if phi_n else []
        slope = decay_slope(phi_n, phis) if len(phi_n) > 1 else None
        return CohomologyVerdict("not_cohomologous", tol, disc, phi_n=list(phi_n),
                                 phi_values=list(phis), phi_slope=slope)
    if disc > tol:
        return CohomologyVerdict("inconclusive", tol, disc)

    x0 = 0.5 * (tmap.branches[0].lo + tmap.branches[0].hi)[None]
    depth = omega_depth(const, 1e-12)
    e0 = int(tmap.element_of(x0)[0])
    letters = branch_sequence(tmap, e0, "lowest", depth, seed)
    covered = tmap.transitions[letters[0]]
    if not covered.all():
        return CohomologyVerdict("inconclusive", tol, disc)
    field_ = PiecewiseField.constant(tmap, 0.0, residual_grid)
    pts = field_.points()
    flat = pts.reshape(-1, tmap.d)
    elems = np.broadcast_to(np.arange(tmap.n_elements).reshape((-1,) + (1,) * tmap.d), pts.shape[:-1]).ravel()
    theta = _theta_series(tmap, roof, flat, elems, x0, letters)
    tx = tmap.forward(flat, elems)
    theta_tx = _theta_series(tmap, roof, tx, tmap.element_of(tx), x0, letters)
    r = (roof.value(flat, elems) + theta - theta_tx).reshape(pts.shape[:-1])
    rfield = field_.with_values(r)
    residual = _fd_sup_derivative(rfield)
    theta_field = field_.with_values(theta.reshape(pts.shape[:-1]))
    if residual < tol:
        axes = tuple(range(1, tmap.d + 1))
        chi = r.mean(axis=axes)
        equal = bool(np.ptp(chi) < tol)
        return CohomologyVerdict("cohomologous", tol, disc, residual, chi, theta_field, equal)
    return CohomologyVerdict("inconclusive", tol, disc, residual, None, theta_field)


def _fd_sup_derivative(f):
    """``sup |Df|`` by first differences on each element grid."""
    best = 0.0
    for e in range(f.boxes.n_elements):
        v = f.values[e]
        for axis in range(f.d):
            h = f.spacing[e, axis]
            best = max(best, float(np.max(np.abs(np.diff(v, axis=axis)))) / h)
    return best


class CohomologyDetector(BaseEstimator):
    """Estimator wrapper; ``fit(map, roof)`` sets ``verdict_``."""

    def __init__(self, tol=DEFAULT_TOL, n_samples=50, residual_grid=256, phi_n=tuple(range(4, 11))):
        self.tol = tol
        self.n_samples = n_samples
        self.residual_grid = residual_grid
        self.phi_n = phi_n

    def fit(self, tmap, roof):
        self.verdict_ = cohomology_detect(tmap, roof, self.tol, self.n_samples, self.residual_grid, self.phi_n)
        return self

    def predict(self, X=None):
        return self.verdict_.verdict


# ---------------------------------------------------------------------------
# cone invariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeInvarianceReport:
    """Worst margin of ``|b'| <= (C3 + C5 e^-lambda)|a'|`` and violations of the half-width form."""

    worst_margin: float
    half_width_violations: int
    worst_half_width_margin: float
    samples: int

    @property
    def passed(self):
        return self.worst_margin >= 0


def cone_invariance_check(tmap, roof, samples=1000, seed=0, constants=None):
    """Push random boundary vectors of ``K`` through one block Jacobian.

    For ``(a, b)`` with ``|b| = C5 |a|`` the image ``(a', b')`` is compared
    with the bound ``(C3 + C5 e^{-lambda})|a'|``, which is below
    ``C5 |a'|`` and so proves invariance.  The count of samples exceeding
    ``C5 |a'| / 2`` is reported separately.
    """
    const = system_constants(tmap, roof) if constants is None else constants
    rng = check_random_state(seed)
    C5 = const.C5
    x = tmap.lo + rng.random((samples, tmap.d)) * (tmap.hi - tmap.lo)
    e = tmap.element_of(x)
    a = rng.standard_normal((samples, tmap.d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = rng.choice([-1.0, 1.0], samples) * C5
    a1 = np.einsum("nij,nj->ni", tmap.jacobian(x, e), a)
    b1 = np.einsum("ni,ni->n", roof.derivative(x, e), a) + b
    na1 = np.linalg.norm(a1, axis=1)
    bound = (const.C3 + C5 * math.exp(-const.lam)) * na1
    margin = bound - np.abs(b1)
    rel = margin / np.maximum(bound, 1e-300)
    half = 0.5 * C5 * na1 - np.abs(b1)
    worst = float(np.min(np.where(np.abs(rel) < 1e-12, 0.0, margin)))
    return ConeInvarianceReport(worst, int(np.sum(half < -1e-12 * np.maximum(na1, 1))), float(half.min()), samples)
