"""Markov maps, roof functions and the inverse-branch machinery.

Points are arrays of shape ``(..., d)``.  Derivative matrices have shape
``(..., d, d)`` and roof derivatives are row vectors of shape ``(..., d)``.
All matrix norms are Euclidean operator norms.

Branch words follow the backward convention: ``word[0]`` is the first
inverse branch applied to ``y``, ``word[-1]`` the last one, so the point
``x = ell_word(y)`` lies in element ``word[-1]`` and ``y`` must lie in the
image of element ``word[0]``.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._validation import as_points, check_alpha, check_positive_int
from .errors import DomainError, NormalizationError, NumericalError, PreconditionError, ResourceError, StructuralError

INVERSION_TOL = {1: 1e-12, 2: 1e-10}
DEFAULT_WORD_BUDGET = 2**20
_BOX_TOL = 1e-9


# ---------------------------------------------------------------------------
# small linear-algebra helpers that stay cheap for d == 1
# ---------------------------------------------------------------------------

def _inv(m):
    if m.shape[-1] == 1:
        return 1.0 / m
    return np.linalg.inv(m)


def _det(m):
    if m.shape[-1] == 1:
        return m[..., 0, 0]
    return np.linalg.det(m)


def _matmul(a, b):
    if a.shape[-1] == 1:
        return a * b
    return a @ b


def _rowmat(row, m):
    """Row vector (..., d) times matrix (..., d, d)."""
    if m.shape[-1] == 1:
        return row * m[..., 0, :]
    return np.einsum("...i,...ij->...j", row, m)


def singular_values(m):
    """Smallest and largest singular value of each matrix in ``m``."""
    if m.shape[-1] == 1:
        a = np.abs(m[..., 0, 0])
        return a, a
    s = np.linalg.svd(m, compute_uv=False)
    return s[..., -1], s[..., 0]


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Branch:
    """One branch ``T|_omega`` on the closed box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray
    forward: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    inverse: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))

    @property
    def volume(self):
        return float(np.prod(self.hi - self.lo))

    @functools.cached_property
    def image_box(self):
        """Axis-aligned bounding box of the image, from a boundary sample."""
        d = self.lo.size
        ticks = [np.linspace(self.lo[i], self.hi[i], 33) for i in range(d)]
        pts = np.stack(np.meshgrid(*ticks, indexing="ij"), axis=-1).reshape(-1, d)
        img = self.forward(pts)
        return img.min(axis=0), img.max(axis=0)

    def solve(self, y, tol=None):
        """Return ``x`` in the box with ``forward(x) = y``."""
        y = np.asarray(y, dtype=float)
        if self.inverse is not None:
            return self.inverse(y)
        return _newton_inverse(self, y, INVERSION_TOL[min(self.lo.size, 2)] if tol is None else tol)


def _newton_inverse(branch, y, tol, max_iter=60):
    d = branch.lo.size
    ilo, ihi = branch.image_box
    span = np.where(ihi > ilo, ihi - ilo, 1.0)
    x = branch.lo + (y - ilo) / span * (branch.hi - branch.lo)
    x = np.clip(x, branch.lo, branch.hi)
    res = np.inf
    for _ in range(max_iter):
        r = branch.forward(x) - y
        res = np.max(np.abs(r), initial=0.0)
        if res < 0.1 * tol:
            break
        if d == 1:
            step = r / branch.jacobian(x)[..., 0]
        else:
            step = np.linalg.solve(branch.jacobian(x), r[..., None])[..., 0]
        x = np.clip(x - step, branch.lo, branch.hi)
    r = np.abs(branch.forward(x) - y)
    bad = np.any(r >= tol, axis=-1)
    if np.any(bad):
        if d != 1:
            raise NumericalError("Newton inversion did not converge", float(r.max()))
        x = x.copy()
        x[bad] = _bisect_1d(branch, y[bad])
        r = np.abs(branch.forward(x) - y)
        if np.any(r >= tol):
            raise NumericalError("inverse branch failed after bisection fallback", float(r.max()))
    return x


def _bisect_1d(branch, y, n_iter=80):
    a = np.broadcast_to(branch.lo, y.shape).copy()
    b = np.broadcast_to(branch.hi, y.shape).copy()
    increasing = branch.forward(branch.hi[None])[0, 0] > branch.forward(branch.lo[None])[0, 0]
    for _ in range(n_iter):
        m = 0.5 * (a + b)
        above = branch.forward(m) > y
        if not increasing:
            above = ~above
        b = np.where(above, m, b)
        a = np.where(above, a, m)
    return 0.5 * (a + b)


class MarkovMap:
    """Piecewise expanding Markov map on a union of axis-aligned boxes.

    Parameters
    ----------
    branches : sequence of Branch
        One branch per partition element; element ``i`` is the closed box
        ``[branches[i].lo, branches[i].hi]``.
    name : str
        Catalog name, used in reports.
    params : tuple
        Catalog parameters, used in reports.

    Raises
    ------
    StructuralError
        If elements overlap, the union is not a box, or some branch image is
        not a union of elements.
    """

    def __init__(self, branches: Sequence[Branch], name="custom", params=()):
        self.branches = tuple(branches)
        if not self.branches:
            raise StructuralError("a Markov map needs at least one partition element")
        self.name = name
        self.params = tuple(params)
        self.d = int(self.branches[0].lo.size)
        self.lo = np.min([b.lo for b in self.branches], axis=0)
        self.hi = np.max([b.hi for b in self.branches], axis=0)
        self._check_partition()
        self.transitions = self._build_transitions()

    def __repr__(self):
        return f"MarkovMap({self.name}{self.params!r}, d={self.d}, elements={self.n_elements})"

    @property
    def n_elements(self):
        return len(self.branches)

    @property
    def volumes(self):
        return np.array([b.volume for b in self.branches])

    @property
    def measure(self):
        return float(np.prod(self.hi - self.lo))

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def _check_partition(self):
        total = sum(b.volume for b in self.branches)
        if abs(total - self.measure) > _BOX_TOL * max(1.0, self.measure):
            raise StructuralError("partition elements do not tile the bounding box of X")
        for i, a in enumerate(self.branches):
            for b in self.branches[i + 1:]:
                overlap = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
                if np.all(overlap > _BOX_TOL):
                    raise StructuralError("partition elements overlap")

    def _build_transitions(self):
        trans = np.zeros((self.n_elements, self.n_elements), dtype=bool)
        for i, br in enumerate(self.branches):
            ilo, ihi = br.image_box
            covered = 0.0
            for j, el in enumerate(self.branches):
                inside = np.all(el.lo >= ilo - _BOX_TOL) and np.all(el.hi <= ihi + _BOX_TOL)
                if inside:
                    trans[i, j] = True
                    covered += el.volume
                else:
                    overlap = np.minimum(el.hi, ihi) - np.maximum(el.lo, ilo)
                    if np.all(overlap > _BOX_TOL):
                        raise StructuralError(
                            f"image of element {i} cuts element {j}: branch image is not a union of elements")
            if abs(covered - float(np.prod(ihi - ilo))) > 1e-7:
                raise StructuralError(f"image of element {i} is not a union of partition elements")
        return trans

    @functools.cached_property
    def successor(self):
        """``successor[a, b]``: letter ``b`` may follow letter ``a`` in a word."""
        return self.transitions.T.copy()

    def count_words(self, n):
        """Number of admissible words of length ``n``."""
        v = np.ones(self.n_elements, dtype=object)
        m = self.successor.astype(object)
        for _ in range(n - 1):
            v = m.dot(v)
        return int(sum(v))

    def element_of(self, x):
        """Index of the (half-open) element containing each point."""
        x = as_points(x, self.d)
        out = np.full(x.shape[:-1], -1, dtype=int)
        for i, b in enumerate(self.branches):
            upper = np.where(b.hi >= self.hi, x <= b.hi, x < b.hi)
            inside = np.all((x >= b.lo) & upper, axis=-1)
            out = np.where((out < 0) & inside, i, out)
        if np.any(out < 0):
            raise DomainError("point outside X")
        return out

    def _per_element(self, fn, x, elem, width):
        x = as_points(x, self.d)
        elem = self.element_of(x) if elem is None else np.broadcast_to(np.asarray(elem), x.shape[:-1])
        out = np.empty(x.shape[:-1] + width)
        for i in np.unique(elem):
            m = elem == i
            out[m] = fn(self.branches[i], x[m])
        return out

    def forward(self, x, elem=None):
        """Apply ``T``; ``elem`` selects the branch (default: containing element)."""
        return self._per_element(lambda b, p: b.forward(p), x, elem, (self.d,))

    def jacobian(self, x, elem=None):
        return self._per_element(lambda b, p: b.jacobian(p), x, elem, (self.d, self.d))

    def image_elements(self, i):
        return np.nonzero(self.transitions[i])[0]

    def image_volume(self, i):
        return float(self.volumes[self.transitions[i]].sum())


# ---------------------------------------------------------------------------
# roofs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Roof:
    """Return-time function ``tau`` with derivative.

    ``value(x, elem)`` and ``derivative(x, elem)`` take points of shape
    ``(..., d)`` and the index of the element whose branch formula applies
    (needed only for roofs that jump across element boundaries).
    """

    value: Callable
    derivative: Callable
    alpha: float = 1.0
    name: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        check_alpha(self.alpha)

    def __call__(self, x, elem=None):
        return self.value(x, elem)


def _unit_coords(lo, hi):
    lo = np.asarray(lo, float)
    w = np.asarray(hi, float) - lo
    return lo, w


def constant_roof(c, alpha=1.0):
    c = float(c)
    return Roof(lambda x, e=None: np.full(x.shape[:-1], c),
                lambda x, e=None: np.zeros(x.shape),
                alpha, "constant", (c,))


def affine_roof(a, b, lo=(0.0,), hi=(1.0,), alpha=1.0):
    """``tau = a + b * sum_i u_i`` with ``u`` the unit coordinates of X."""
    a, b = float(a), float(b)
    lo, w = _unit_coords(lo, hi)
    return Roof(lambda x, e=None: a + b * np.sum((x - lo) / w, axis=-1),
                lambda x, e=None: np.broadcast_to(b / w, x.shape).copy(),
                alpha, "affine", (a, b))


def poly_roof(coeffs, lo=(0.0,), hi=(1.0,), alpha=1.0):
    """``tau = sum_k c_k s^k`` with ``s = sum_i u_i``."""
    coeffs = np.asarray(coeffs, float)
    lo, w = _unit_coords(lo, hi)
    dcoeffs = np.polynomial.polynomial.polyder(coeffs) if coeffs.size > 1 else np.zeros(1)

    def value(x, e=None):
        return np.polynomial.polynomial.polyval(np.sum((x - lo) / w, axis=-1), coeffs)

    def derivative(x, e=None):
        s = np.sum((x - lo) / w, axis=-1)
        return np.polynomial.polynomial.polyval(s, dcoeffs)[..., None] / w

    return Roof(value, derivative, alpha, "poly", tuple(coeffs))


def trig_roof(c0, c1, k=1, lo=(0.0,), hi=(1.0,), alpha=1.0):
    """``tau = c0 + c1 * sum_i cos(2 pi k u_i)``."""
    c0, c1, k = float(c0), float(c1), float(k)
    lo, w = _unit_coords(lo, hi)
    om = 2 * np.pi * k

    def value(x, e=None):
        return c0 + c1 * np.sum(np.cos(om * (x - lo) / w), axis=-1)

    def derivative(x, e=None):
        return -c1 * om * np.sin(om * (x - lo) / w) / w

    return Roof(value, derivative, alpha, "trig", (c0, c1, k))


def coboundary_roof(tmap, theta, dtheta, chi, alpha=1.0):
    """Roof ``tau = theta o T - theta + chi`` with ``chi`` constant per element.

    ``theta(x)`` maps ``(..., d) -> (...)`` and ``dtheta`` returns the
    gradient ``(..., d)``.  The result is cohomologous to a piecewise constant
    function by construction.
    """
    chi = np.asarray(chi, float)
    if chi.shape != (tmap.n_elements,):
        raise PreconditionError("chi needs one value per partition element")

    def value(x, e=None):
        e = tmap.element_of(x) if e is None else e
        return theta(tmap.forward(x, e)) - theta(x) + chi[e]

    def derivative(x, e=None):
        e = tmap.element_of(x) if e is None else e
        return _rowmat(dtheta(tmap.forward(x, e)), tmap.jacobian(x, e)) - dtheta(x)

    return Roof(value, derivative, alpha, "coboundary", tuple(chi))


# ---------------------------------------------------------------------------
# catalog maps
# ---------------------------------------------------------------------------

def _affine_branch(lo, hi, slope, shift):
    lo, hi = np.array([lo], float), np.array([hi], float)
    return Branch(lo, hi,
                  lambda x: slope * x - shift,
                  lambda x: np.full(x.shape + (1,), float(slope)),
                  lambda y: (y + shift) / slope)


def full_branch_affine(m):
    """``x -> m x mod 1`` on [0, 1]."""
    return [_affine_branch(k / m, (k + 1) / m, m, k) for k in range(m)]


def doubling():
    return MarkovMap(full_branch_affine(2), "doubling")


def tripling():
    return MarkovMap(full_branch_affine(3), "tripling")


def _perturbed_branches(eps):
    tp = 2 * np.pi
    out = []
    for k in range(2):
        out.append(Branch(np.array([k / 2]), np.array([(k + 1) / 2]),
                          lambda x, k=k: 2 * x + eps * np.sin(tp * x) - k,
                          lambda x: (2 + tp * eps * np.cos(tp * x))[..., None],
                          None))
    return out


def perturbed_doubling(eps=0.05):
    """``x -> 2x + eps sin(2 pi x) mod 1``; expanding for ``|eps| < 1/(2 pi)``."""
    eps = float(eps)
    return MarkovMap(_perturbed_branches(eps), "perturbed_doubling", (eps,))


def markov_2d_product(eps=0.0):
    """Perturbed doubling x tripling on ``[0, s]^2`` with ``s = 1/sqrt(2)``.

    The side is chosen so that diam(X) = 1.
    """
    eps = float(eps)
    s = 1 / math.sqrt(2)
    first = _perturbed_branches(eps) if eps else full_branch_affine(2)
    second = full_branch_affine(3)
    branches = []
    for b1 in first:
        for b2 in second:
            branches.append(_product_branch(b1, b2, s))
    return MarkovMap(branches, "markov_2d_product", (eps,))


def _product_branch(b1, b2, s):
    lo = s * np.concatenate([b1.lo, b2.lo])
    hi = s * np.concatenate([b1.hi, b2.hi])

    def forward(x):
        return s * np.concatenate([b1.forward(x[..., :1] / s), b2.forward(x[..., 1:] / s)], axis=-1)

    def jacobian(x):
        j = np.zeros(x.shape + (2,))
        j[..., 0, 0] = b1.jacobian(x[..., :1] / s)[..., 0, 0]
        j[..., 1, 1] = b2.jacobian(x[..., 1:] / s)[..., 0, 0]
        return j

    def inverse(y):
        return s * np.concatenate([b1.solve(y[..., :1] / s), b2.solve(y[..., 1:] / s)], axis=-1)

    return Branch(lo, hi, forward, jacobian, inverse)


MAP_CATALOG = {
    "doubling": doubling,
    "tripling": tripling,
    "perturbed_doubling": perturbed_doubling,
    "markov_2d_product": markov_2d_product,
}

ROOF_CATALOG = {
    "constant": constant_roof,
    "affine": affine_roof,
    "trig": trig_roof,
    "poly": poly_roof,
}


def make_map(name, params=()):
    try:
        factory = MAP_CATALOG[name]
    except KeyError:
        raise PreconditionError(f"unknown map {name!r}; catalog: {sorted(MAP_CATALOG)}") from None
    return factory(*params)


def make_roof(name, params=(), tmap=None, alpha=1.0):
    """Build a catalog roof in the unit coordinates of ``tmap``'s domain."""
    if name not in ROOF_CATALOG:
        raise PreconditionError(f"unknown roof {name!r}; catalog: {sorted(ROOF_CATALOG)}")
    box = {} if tmap is None else {"lo": tmap.lo, "hi": tmap.hi}
    if name == "constant":
        return constant_roof(*params, alpha=alpha)
    if name == "poly":
        return poly_roof(list(params), alpha=alpha, **box)
    return ROOF_CATALOG[name](*params, alpha=alpha, **box)


# ---------------------------------------------------------------------------
# words
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchWord:
    """Sequence of partition indices naming the composed inverse branch."""

    letters: tuple

    def __post_init__(self):
        object.__setattr__(self, "letters", tuple(int(c) for c in self.letters))
        if not self.letters:
            raise PreconditionError("a branch word needs at least one letter")

    def __len__(self):
        return len(self.letters)

    def is_admissible(self, tmap):
        s = tmap.successor
        return all(0 <= c < tmap.n_elements for c in self.letters) and all(
            s[a, b] for a, b in zip(self.letters, self.letters[1:]))

    def concat(self, other):
        """Word for ``ell_self o ell_other``: apply ``other`` first."""
        return BranchWord(tuple(other.letters) + tuple(self.letters))


def _as_word(word, tmap):
    w = word if isinstance(word, BranchWord) else BranchWord(tuple(word))
    if not w.is_admissible(tmap):
        raise DomainError(f"word {w.letters} is not admissible for {tmap!r}")
    return w


def enumerate_words(tmap, n):
    """All admissible words of length ``n`` in lexicographic order, shape (W, n)."""
    words = np.arange(tmap.n_elements)[:, None]
    s = tmap.successor
    for _ in range(n - 1):
        parent, child = np.nonzero(s[words[:, -1]])
        words = np.concatenate([words[parent], child[:, None]], axis=1)
    return words


def _check_in_image(tmap, first_letter, y):
    ilo, ihi = tmap.branches[first_letter].image_box
    if np.any(y < ilo - 1e-12) or np.any(y > ihi + 1e-12):
        raise DomainError(f"point outside the image of element {first_letter}")


def inverse_branch(tmap, word, y):
    """Return ``x = ell_word(y)`` with ``T^n x = y``.

    Raises
    ------
    DomainError
        If ``y`` is outside ``T^n(omega)``.
    NumericalError
        If root finding fails; carries the residual.
    """
    w = _as_word(word, tmap)
    y = as_points(y, tmap.d)
    _check_in_image(tmap, w.letters[0], y)
    x = y
    for c in w.letters:
        x = tmap.branches[c].solve(x)
    return x


def jacobian_J(tmap, word, y):
    """``(J_n(ell y), D ell(y))``; ``J_n = |det D ell(y)| = 1 / |det DT^n(x)|``."""
    w = _as_word(word, tmap)
    y = as_points(y, tmap.d)
    _check_in_image(tmap, w.letters[0], y)
    x = y
    dl = np.broadcast_to(np.eye(tmap.d), y.shape + (tmap.d,)).copy()
    for c in w.letters:
        x = tmap.branches[c].solve(x)
        dl = _matmul(_inv(tmap.branches[c].jacobian(x)), dl)
    return np.abs(_det(dl)), dl


def roof_sum_and_derivative(tmap, roof, word, y, constants=None):
    """``(tau_n(ell y), D(tau_n o ell)(y))`` by the chain-rule sum.

    The derivative is checked against ``C5 / 2``; a violation means the
    measured constants under-resolve the roof and raises NumericalError.
    """
    w = _as_word(word, tmap)
    y = as_points(y, tmap.d)
    _check_in_image(tmap, w.letters[0], y)
    x = y
    dl = np.broadcast_to(np.eye(tmap.d), y.shape + (tmap.d,)).copy()
    total = np.zeros(y.shape[:-1])
    deriv = np.zeros(y.shape)
    for c in w.letters:
        x = tmap.branches[c].solve(x)
        dl = _matmul(_inv(tmap.branches[c].jacobian(x)), dl)
        e = np.full(x.shape[:-1], c)
        total = total + roof.value(x, e)
        deriv = deriv + _rowmat(roof.derivative(x, e), dl)
    const = system_constants(tmap, roof) if constants is None else constants
    bound = 0.5 * const.C5
    worst = float(np.max(np.linalg.norm(deriv, axis=-1), initial=0.0))
    if worst > bound * (1 + 1e-6) + 1e-12:
        raise NumericalError(f"|D(tau_n o ell)| = {worst:.6g} exceeds C5/2 = {bound:.6g}; "
                             "constants measured on too coarse a grid")
    return total, deriv


# ---------------------------------------------------------------------------
# assumption verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemConstants:
    """Measured constants of a (map, roof) pair; ``C5 = 2 C3 / (1 - e^-lambda)``."""

    alpha: float
    lam: float
    Lam: float
    C2: float
    C3: float
    C4: float
    tau_min: float
    min_image_volume: float

    @property
    def C5(self):
        return 2 * self.C3 / (1 - math.exp(-self.lam))

    @property
    def C6(self):
        return self.C2 / (1 - math.exp(-self.lam * self.alpha))

    @property
    def C7(self):
        return math.exp(self.C6) / self.min_image_volume

    @property
    def cone_width(self):
        """C5, floored at a tiny positive value so the cone is non-degenerate."""
        return max(self.C5, 1e-9)


@dataclass
class AssumptionReport:
    """Measured extremal constants and pass flags of the standing assumptions."""

    constants: SystemConstants
    covering_index: Optional[int]
    diameter: float
    measure: float
    passes: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict)
    grid_density: int = 0

    @property
    def all_pass(self):
        """Every standing assumption holds; normalizations are reported separately."""
        return all(self.passes.values())

    def to_dict(self):
        c = self.constants
        return {
            "lambda": c.lam, "Lambda": c.Lam, "C2": c.C2, "C3": c.C3, "C4": c.C4,
            "C5": c.C5, "C6": c.C6, "C7": c.C7, "tau_min": c.tau_min, "alpha": c.alpha,
            "covering_index": self.covering_index, "diameter": self.diameter,
            "measure": self.measure, "grid_density": self.grid_density,
            "passes": dict(self.passes), "normalized": dict(self.normalized),
            "all_pass": self.all_pass,
        }


def element_grid(branch, density):
    """Tensor grid with ``density`` nodes per axis on the closed box."""
    d = branch.lo.size
    ticks = [np.linspace(branch.lo[i], branch.hi[i], density) for i in range(d)]
    return np.stack(np.meshgrid(*ticks, indexing="ij"), axis=-1)


def _pair_offsets(shape):
    d = len(shape)
    offs = []
    s = 1
    while s < max(shape):
        for axis in range(d):
            if s < shape[axis]:
                o = [0] * d
                o[axis] = s
                offs.append(tuple(o))
        if d == 2 and s < min(shape):
            offs.append((s, s))
            offs.append((s, -s))
        s *= 2
    return offs


def _shifted_pairs(arr, off):
    """Views ``(a, b)`` of ``arr`` (grid axes first) with ``b`` shifted by ``off``."""
    sl_a, sl_b = [], []
    for o, n in zip(off, arr.shape):
        if o >= 0:
            sl_a.append(slice(0, n - o))
            sl_b.append(slice(o, n))
        else:
            sl_a.append(slice(-o, n))
            sl_b.append(slice(0, n + o))
    return arr[tuple(sl_a)], arr[tuple(sl_b)]


def _estimate_inducing_iterate(tmap, max_n=8):
    for n in range(2, max_n + 1):
        words = enumerate_words(tmap, n)
        if len(words) > 4096:
            break
        worst = np.inf
        for w in words:
            img = tmap.branches[w[0]].image_box
            y = np.stack([np.linspace(img[0][i], img[1][i], 9) for i in range(tmap.d)], -1)
            _, dl = jacobian_J(tmap, w, y)
            worst = min(worst, float(np.min(1 / singular_values(dl)[1])))
        if worst > 1:
            return n
    return None


def verify_assumptions(tmap, roof, grid_density=None):
    """Measure the standing-assumption constants on a tensor grid.

    Parameters
    ----------
    tmap : MarkovMap
    roof : Roof
    grid_density : int, optional
        Nodes per axis per element (default 4097 for d=1, 129 for d=2).

    Returns
    -------
    AssumptionReport

    Raises
    ------
    NormalizationError
        If ``min sigma_min(DT) <= 1``; the message names an iterate whose
        induced map would expand uniformly.
    """
    d = tmap.d
    if grid_density is None:
        grid_density = 4097 if d == 1 else 129
    grid_density = check_positive_int(grid_density, "grid_density", 2)
    alpha = roof.alpha
    lam, Lam, C2, C3, C4, tmin = np.inf, -np.inf, 0.0, 0.0, -np.inf, np.inf
    offsets = _pair_offsets((grid_density,) * d)
    for i, br in enumerate(tmap.branches):
        x = element_grid(br, grid_density)
        e = np.full(x.shape[:-1], i)
        jac = br.jacobian(x)
        smin, smax = singular_values(jac)
        lam = min(lam, float(np.log(smin).min()))
        Lam = max(Lam, float(np.log(smax).max()))
        logdet = np.log(np.abs(_det(jac)))
        tx = br.forward(x)
        for off in offsets:
            a, b = _shifted_pairs(logdet, off)
            pa, pb = _shifted_pairs(tx, off)
            dist = np.linalg.norm(pa - pb, axis=-1)
            ok = dist > 0
            if np.any(ok):
                C2 = max(C2, float(np.max(np.abs(a - b)[ok] / dist[ok] ** alpha)))
        tau = roof.value(x, e)
        dtau = roof.derivative(x, e)
        C3 = max(C3, float(np.max(np.linalg.norm(_rowmat(dtau, _inv(jac)), axis=-1))))
        C4 = max(C4, float(tau.max()))
        tmin = min(tmin, float(tau.min()))
    if lam <= 0:
        it = _estimate_inducing_iterate(tmap)
        hint = f"; the iterate n={it} expands uniformly" if it else ""
        raise NormalizationError(
            "DT is not uniformly expanding in one step (min singular value <= 1); "
            f"re-specify the map as an induced iterate{hint}", it)
    vols = [tmap.image_volume(i) for i in range(tmap.n_elements)]
    const = SystemConstants(alpha, lam, Lam, C2, C3, C4, tmin, min(vols))
    cover = covering_index(tmap)
    passes = {
        "expanding": lam > 0,
        "distortion": bool(np.isfinite(C2)),
        "tau_control": bool(np.isfinite(C3)),
        "bound_tau": bool(np.isfinite(C4)),
        "tau_positive": tmin > 0,
        "covering": cover is not None,
    }
    normalized = {
        "diameter": tmap.diameter <= 1 + 1e-12,
        "measure": tmap.measure <= 1 + 1e-12,
        "tau": C4 <= 1 + 1e-12,
    }
    return AssumptionReport(const, cover, tmap.diameter, tmap.measure, passes, normalized, grid_density)


def covering_index(tmap, max_n=64):
    """Least ``n`` with ``T^n(omega) = X`` for every element, by breadth-first search."""
    m = tmap.transitions.astype(np.int64)
    reach = np.eye(tmap.n_elements, dtype=np.int64)
    for n in range(1, max_n + 1):
        reach = (reach @ m > 0).astype(np.int64)
        if reach.all():
            return n
    return None


@functools.lru_cache(maxsize=64)
def system_constants(tmap, roof, grid_density=None):
    """Cached ``verify_assumptions(...).constants``."""
    return verify_assumptions(tmap, roof, grid_density).constants


# ---------------------------------------------------------------------------
# preimage trees
# ---------------------------------------------------------------------------

@dataclass
class PreimageBlock:
    """All preimages of a grid of points under a contiguous range of words.

    Arrays are indexed ``[word, point]``; ``x`` is ``ell_w(y)``, ``log_jac``
    is ``log J_n(x)``, ``tau_sum`` is ``tau_n(x)``, ``valid`` marks points
    ``y`` inside ``T^n(omega)``.  ``dl`` and ``dtau`` (optional) are
    ``D ell_w(y)`` and ``D(tau_n o ell_w)(y)``.
    """

    words: np.ndarray
    x: np.ndarray
    log_jac: np.ndarray
    tau_sum: np.ndarray
    valid: np.ndarray
    dl: Optional[np.ndarray] = None
    dtau: Optional[np.ndarray] = None

    @property
    def level(self):
        return self.words.shape[1]

    @property
    def last(self):
        return self.words[:, -1]

    def take(self, idx):
        return PreimageBlock(self.words[idx], self.x[idx], self.log_jac[idx], self.tau_sum[idx],
                             self.valid[idx],
                             None if self.dl is None else self.dl[idx],
                             None if self.dtau is None else self.dtau[idx])


def _root_block(tmap, y, y_elem, derivatives):
    g = y.shape[0]
    d = tmap.d
    blk = PreimageBlock(np.zeros((1, 0), dtype=int), y[None], np.zeros((1, g)), np.zeros((1, g)),
                        np.ones((1, g), dtype=bool))
    if derivatives:
        blk.dl = np.broadcast_to(np.eye(d), (1, g, d, d)).copy()
        blk.dtau = np.zeros((1, g, d))
    return blk


def _extend(tmap, roof, blk, y_elem, derivatives):
    nb = tmap.n_elements
    if blk.level == 0:
        parents = np.repeat(np.arange(blk.words.shape[0]), nb)
        children = np.tile(np.arange(nb), blk.words.shape[0])
    else:
        parents, children = np.nonzero(tmap.successor[blk.last])
    order = np.lexsort((children, parents))
    parents, children = parents[order], children[order]
    words = np.concatenate([blk.words[parents], children[:, None]], axis=1)
    x_prev = blk.x[parents]
    x_new = np.empty_like(x_prev)
    jac = np.empty(x_prev.shape + (tmap.d,))
    valid = blk.valid[parents].copy()
    for c in np.unique(children):
        m = children == c
        br = tmap.branches[c]
        pts = x_prev[m]
        if blk.level == 0:
            ilo, ihi = br.image_box
            valid[m] &= tmap.transitions[c][y_elem][None, :]
            pts = np.clip(pts, ilo, ihi)
        x_new[m] = br.solve(pts)
        jac[m] = br.jacobian(x_new[m])
    e = np.broadcast_to(children[:, None], x_new.shape[:-1])
    log_jac = blk.log_jac[parents] - np.log(np.abs(_det(jac)))
    tau_sum = blk.tau_sum[parents] + roof.value(x_new, e)
    out = PreimageBlock(words, x_new, log_jac, tau_sum, valid)
    if derivatives:
        dl = _matmul(_inv(jac), blk.dl[parents])
        out.dl = dl
        out.dtau = blk.dtau[parents] + _rowmat(roof.derivative(x_new, e), dl)
    return out


def _descend(tmap, roof, blk, y_elem, n, derivatives, max_points, visit, results):
    if blk.level > 0:
        results.append((blk.level, visit(blk)))
    if blk.level == n:
        return
    nchild = tmap.successor[blk.last].sum(axis=1) if blk.level else np.full(1, tmap.n_elements)
    g = blk.x.shape[1]
    if nchild.sum() * g <= max_points:
        _descend(tmap, roof, _extend(tmap, roof, blk, y_elem, derivatives), y_elem, n, derivatives,
                 max_points, visit, results)
        return
    for idx in _chunks(nchild * g, max_points):
        _descend(tmap, roof, _extend(tmap, roof, blk.take(idx), y_elem, derivatives), y_elem, n,
                 derivatives, max_points, visit, results)


def _chunks(cost, budget):
    start, acc = 0, 0
    for i, c in enumerate(cost):
        if acc and acc + c > budget:
            yield np.arange(start, i)
            start, acc = i, 0
        acc += c
    yield np.arange(start, len(cost))


def reduce_preimages(tmap, roof, y, n, visit, *, y_elem=None, derivatives=False,
                     max_points=1 << 21, n_jobs=1, word_budget=DEFAULT_WORD_BUDGET):
    """Walk the preimage tree of ``y`` to depth ``n`` and sum ``visit`` per level.

    ``visit(block)`` returns an array (or None) for each block; blocks of a
    level arrive in lexicographic word order and their partial results are
    summed pairwise in that order, so the result is independent of
    ``n_jobs``.

    Returns
    -------
    dict
        ``level -> summed partial result`` for levels ``1..n``.
    """
    y = as_points(y, tmap.d).reshape(-1, tmap.d)
    if y_elem is None:
        y_elem = tmap.element_of(y)
    words = tmap.count_words(n)
    if words > word_budget:
        raise ResourceError(f"{words} branch words of length {n} exceed the budget of {word_budget}; "
                            "compose smaller powers instead (adds one interpolation per factor)")
    g = y.shape[0]
    max_points = max(int(max_points), tmap.n_elements * g)
    root = _root_block(tmap, y, y_elem, derivatives)

    # breadth-first until the frontier is worth splitting across workers
    results = []
    blk = root
    while blk.level < n and blk.words.shape[0] * tmap.n_elements * g <= max_points // 4:
        blk = _extend(tmap, roof, blk, y_elem, derivatives)
        results.append((blk.level, visit(blk)))
    if blk.level < n:
        nchild = (tmap.successor[blk.last].sum(axis=1) if blk.level else np.full(1, tmap.n_elements))
        chunks = list(_chunks(nchild * g, max(max_points // 4, g)))
        if blk.level == 0:
            chunks = [np.arange(1)]

        def work(idx):
            part = []
            child = _extend(tmap, roof, blk.take(idx), y_elem, derivatives)
            _descend(tmap, roof, child, y_elem, n, derivatives, max_points, visit, part)
            return part

        if n_jobs > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(n_jobs) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(idx) for idx in chunks]
        for p in parts:
            results.extend(p)
    out = {}
    for level in range(1, n + 1):
        vals = [v for lv, v in results if lv == level and v is not None]
        if vals:
            out[level] = np.sum(np.stack(vals), axis=0) if len(vals) > 1 else vals[0]
    return out


def preimages(tmap, roof, y, n, derivatives=True):
    """Concatenated preimage block at depth ``n`` (for small problems)."""
    blocks = []
    reduce_preimages(tmap, roof, y, n, lambda b: blocks.append(b) if b.level == n else None,
                     derivatives=derivatives, max_points=1 << 62)
    if len(blocks) == 1:
        return blocks[0]
    cat = lambda name: None if getattr(blocks[0], name) is None else np.concatenate(
        [getattr(b, name) for b in blocks])
    return PreimageBlock(cat("words"), cat("x"), cat("log_jac"), cat("tau_sum"), cat("valid"),
                         cat("dl"), cat("dtau"))
