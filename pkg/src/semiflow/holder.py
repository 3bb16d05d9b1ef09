"""Piecewise Hölder fields, their norms, mollification and oscillatory integrals."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.signal import fftconvolve

from ._validation import as_points, check_alpha, check_positive_int
from .errors import NumericalError, PreconditionError
from .phase_space import _pair_offsets, _shifted_pairs

DEFAULT_RESOLUTION = {1: 4096, 2: 256}


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Boxes:
    """Closed axis-aligned boxes ``[lo[i], hi[i]]`` carrying the pieces of a field."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def d(self):
        return self.lo.shape[1]

    @property
    def n_elements(self):
        return self.lo.shape[0]

    @property
    def volumes(self):
        return np.prod(self.hi - self.lo, axis=1)

    def element_of(self, x):
        x = as_points(x, self.d)
        top = self.hi.max(axis=0)
        out = np.full(x.shape[:-1], -1, dtype=int)
        for i in range(self.n_elements):
            upper = np.where(self.hi[i] >= top, x <= self.hi[i], x < self.hi[i])
            inside = np.all((x >= self.lo[i]) & upper, axis=-1)
            out = np.where((out < 0) & inside, i, out)
        if np.any(out < 0):
            raise PreconditionError("point outside the field's domain")
        return out


def as_boxes(obj):
    """Boxes of a MarkovMap, of a ``Boxes``, or of a single interval ``(a, b)``."""
    if isinstance(obj, Boxes):
        return obj
    if hasattr(obj, "branches"):
        return Boxes(np.array([b.lo for b in obj.branches], float),
                     np.array([b.hi for b in obj.branches], float))
    a, b = obj
    return Boxes(np.atleast_2d(np.asarray(a, float)).reshape(1, -1),
                 np.atleast_2d(np.asarray(b, float)).reshape(1, -1))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class PiecewiseField:
    """Function sampled per partition element on a uniform closed grid.

    Parameters
    ----------
    boxes : Boxes, MarkovMap or (a, b)
        The partition elements.
    values : ndarray
        Shape ``(E, G)`` for d=1 or ``(E, G, G)`` for d=2; real or complex.
    alpha : float
        Hölder exponent associated with the field.

    Notes
    -----
    Grids include both endpoints of each element, so values on the closure
    of every element are represented and interpolation (linear in d=1,
    bilinear in d=2) never crosses an element boundary.
    """

    def __init__(self, boxes, values, alpha=1.0):
        self.boxes = as_boxes(boxes)
        self.values = np.asarray(values)
        self.alpha = check_alpha(alpha)
        d = self.boxes.d
        if self.values.ndim != d + 1 or self.values.shape[0] != self.boxes.n_elements:
            raise PreconditionError(f"values must have shape (elements,) + (G,)*{d}")
        if len(set(self.values.shape[1:])) != 1:
            raise PreconditionError("grid resolution must be the same along every axis")

    # construction -----------------------------------------------------------
    @classmethod
    def from_function(cls, boxes, fn: Callable, resolution=None, alpha=1.0):
        """Sample ``fn(x, elem)`` (or ``fn(x)``) on the per-element grids."""
        boxes = as_boxes(boxes)
        res = DEFAULT_RESOLUTION[boxes.d] if resolution is None else check_positive_int(resolution, "resolution", 1)
        pts = grid_points(boxes, res)
        elem = np.broadcast_to(np.arange(boxes.n_elements).reshape((-1,) + (1,) * boxes.d), pts.shape[:-1])
        try:
            vals = fn(pts, elem)
        except TypeError:
            vals = fn(pts)
        return cls(boxes, np.broadcast_to(vals, pts.shape[:-1]).copy(), alpha)

    @classmethod
    def constant(cls, boxes, c, resolution=None, alpha=1.0):
        boxes = as_boxes(boxes)
        res = DEFAULT_RESOLUTION[boxes.d] if resolution is None else resolution
        return cls(boxes, np.full((boxes.n_elements,) + (res,) * boxes.d, c), alpha)

    def with_values(self, values):
        return PiecewiseField(self.boxes, values, self.alpha)

    # geometry ---------------------------------------------------------------
    @property
    def d(self):
        return self.boxes.d

    @property
    def resolution(self):
        return self.values.shape[1]

    @property
    def spacing(self):
        """Grid spacing per element and axis, shape (E, d)."""
        return (self.boxes.hi - self.boxes.lo) / max(self.resolution - 1, 1)

    def points(self):
        return grid_points(self.boxes, self.resolution)

    # evaluation -------------------------------------------------------------
    def __call__(self, x, elem=None):
        return self.evaluate(x, elem)

    def evaluate(self, x, elem=None):
        """Interpolate at ``x`` using the grid of element ``elem`` (default: containing element)."""
        x = as_points(x, self.d)
        if elem is None:
            elem = self.boxes.element_of(x)
        elem = np.broadcast_to(np.asarray(elem, dtype=int), x.shape[:-1])
        g = self.resolution
        lo, hi = self.boxes.lo[elem], self.boxes.hi[elem]
        t = np.clip((x - lo) / (hi - lo), 0.0, 1.0) * (g - 1)
        i = np.clip(np.floor(t).astype(int), 0, max(g - 2, 0))
        w = t - i
        if g == 1:
            return self.values[(elem,) + (0,) * self.d]
        if self.d == 1:
            v = self.values
            return v[elem, i[..., 0]] * (1 - w[..., 0]) + v[elem, i[..., 0] + 1] * w[..., 0]
        v = self.values
        i0, i1, w0, w1 = i[..., 0], i[..., 1], w[..., 0], w[..., 1]
        return ((v[elem, i0, i1] * (1 - w0) + v[elem, i0 + 1, i1] * w0) * (1 - w1)
                + (v[elem, i0, i1 + 1] * (1 - w0) + v[elem, i0 + 1, i1 + 1] * w0) * w1)

    # arithmetic -------------------------------------------------------------
    def _other(self, other):
        if isinstance(other, PiecewiseField):
            if other.values.shape != self.values.shape:
                raise PreconditionError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return self.with_values(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.with_values(self.values - self._other(other))

    def __mul__(self, other):
        return self.with_values(self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.with_values(self.values / self._other(other))

    def __neg__(self):
        return self.with_values(-self.values)

    def conj(self):
        return self.with_values(np.conj(self.values))

    def abs(self):
        return self.with_values(np.abs(self.values))

    # norms ------------------------------------------------------------------
    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def integral(self):
        """Trapezoid-rule integral against Lebesgue measure."""
        v = self.values
        g = self.resolution
        if g > 1:
            w = np.full(g, 1.0 / (g - 1))
            w[[0, -1]] *= 0.5
            for _ in range(self.d):
                v = v @ w
        else:
            v = v.reshape(v.shape[0])
        total = np.sum(v * self.boxes.volumes)
        return complex(total) if np.iscomplexobj(total) else float(total)

    def l1_norm(self):
        return float(self.abs().integral())

    def seminorm(self, alpha=None):
        return holder_seminorm(self, self.alpha if alpha is None else alpha)

    def holder_norm(self, alpha=None):
        """``|f|_alpha + ||f||_inf``."""
        return self.seminorm(alpha) + self.sup_norm()

    def norms(self, b=0.0, alpha=None):
        return norm_report(self, self.alpha if alpha is None else alpha, b)

    # serialization ----------------------------------------------------------
    def to_csv(self, path=None):
        """Rows ``element, i[, j], re, im``; returns the text when ``path`` is None."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        idx_cols = ["i"] if self.d == 1 else ["i", "j"]
        w.writerow(["element", *idx_cols, "re", "im"])
        for index in np.ndindex(self.values.shape):
            v = complex(self.values[index])
            w.writerow([*index, f"{v.real:.17g}", f"{v.imag:.17g}"])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", newline="") as fh:
            fh.write(text)
        return path

    @classmethod
    def from_csv(cls, boxes, source, alpha=1.0):
        """Inverse of :meth:`to_csv`; ``source`` is a path or CSV text."""
        boxes = as_boxes(boxes)
        text = source if "\n" in str(source) else open(source).read()
        rows = list(csv.reader(io.StringIO(text)))[1:]
        idx = np.array([[int(c) for c in r[:-2]] for r in rows])
        vals = np.array([complex(float(r[-2]), float(r[-1])) for r in rows])
        shape = tuple(idx.max(axis=0) + 1)
        out = np.zeros(shape, complex)
        out[tuple(idx.T)] = vals
        if np.all(out.imag == 0):
            out = out.real
        return cls(boxes, out, alpha)


def grid_points(boxes, resolution):
    """Grid nodes, shape ``(E,) + (G,)*d + (d,)``."""
    boxes = as_boxes(boxes)
    t = np.linspace(0.0, 1.0, resolution)
    if boxes.d == 1:
        return (boxes.lo[:, None, :] + t[None, :, None] * (boxes.hi - boxes.lo)[:, None, :])
    tt = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1)
    return boxes.lo[:, None, None, :] + tt[None] * (boxes.hi - boxes.lo)[:, None, None, :]


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def holder_seminorm(f: PiecewiseField, alpha=None):
    """Per-element Hölder seminorm estimated on dyadic-scale grid pairs.

    Pairs at spacing ``h, 2h, 4h, ...`` along each axis (and both diagonals
    in d=2) are compared, and the maximum of ``|f(x) - f(y)| / |x - y|^alpha``
    over elements is returned.  This is a lower bound for the true seminorm
    that converges as the grid refines.
    """
    alpha = check_alpha(f.alpha if alpha is None else alpha)
    g = f.resolution
    if g < 2:
        return 0.0
    best = 0.0
    offsets = _pair_offsets((g,) * f.d)
    for e in range(f.boxes.n_elements):
        v = f.values[e]
        h = f.spacing[e]
        for off in offsets:
            a, b = _shifted_pairs(v, off)
            dist = float(np.linalg.norm(np.asarray(off) * h))
            best = max(best, float(np.max(np.abs(a - b))) / dist ** alpha)
    return best


def holder_seminorm_allpairs(values, x, alpha):
    """Brute-force seminorm over all pairs of a 1-D sample (for validation)."""
    values = np.asarray(values)
    x = np.asarray(x, float)
    dv = np.abs(values[:, None] - values[None, :])
    dx = np.abs(x[:, None] - x[None, :])
    mask = dx > 0
    return float(np.max(dv[mask] / dx[mask] ** alpha))


@dataclass(frozen=True)
class NormReport:
    """Sup norm, Hölder seminorm and the frequency-adapted (b)-norm of a field."""

    sup: float
    seminorm: float
    b: float
    alpha: float

    @property
    def holder(self):
        return self.seminorm + self.sup

    @property
    def b_norm(self):
        return self.seminorm / (1 + abs(self.b) ** self.alpha) + self.holder


def norm_report(f, alpha, b=0.0):
    alpha = check_alpha(alpha)
    return NormReport(f.sup_norm(), holder_seminorm(f, alpha), float(b), alpha)


def b_norm(f, alpha, b):
    """``|f|_alpha / (1 + |b|^alpha) + |f|_alpha + ||f||_inf``."""
    return norm_report(f, alpha, b).b_norm


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def bump(z):
    """``rho(z) = 15/16 (1 - z^2)^2`` on (-1, 1): C^1, unit mass, ``int |rho'| = 15/8``."""
    z = np.asarray(z, float)
    return np.where(np.abs(z) < 1, 15 / 16 * (1 - z * z) ** 2, 0.0)


def bump_derivative(z):
    z = np.asarray(z, float)
    return np.where(np.abs(z) < 1, -15 / 4 * z * (1 - z * z), 0.0)


@dataclass
class MollifyResult:
    """Mollified field ``g_b`` with measured errors and the bounds they must satisfy."""

    g: PiecewiseField
    derivative: PiecewiseField
    sup_error: float
    sup_derivative: float
    seminorm: float
    error_bound: float
    derivative_bound: float
    kappa: float

    @property
    def ok(self):
        slack = 1e-9 * (1 + self.seminorm)
        return self.sup_error <= self.error_bound + slack and self.sup_derivative <= self.derivative_bound + slack


def _single_interval(f, name):
    if f.d != 1 or f.boxes.n_elements != 1:
        raise PreconditionError(f"{name} must be a field on a single interval")


def mollify(k: PiecewiseField, theta_prime: PiecewiseField, b: float, alpha=None, min_kernel_nodes=64):
    """Convolve ``k / theta'`` with ``rho_b(z) = b rho(b z)``.

    The quotient is extended by constants beyond the interval, which keeps
    its Hölder seminorm unchanged.  Returned bounds are
    ``b^-alpha |k/theta'|_alpha`` for the sup error and
    ``2 b^(1-alpha) |k/theta'|_alpha`` for the derivative.

    Raises
    ------
    PreconditionError
        If ``min |theta'| <= 0`` or ``b <= 1``.
    """
    _single_interval(k, "k")
    _single_interval(theta_prime, "theta_prime")
    alpha = check_alpha(k.alpha if alpha is None else alpha)
    if not b > 1:
        raise PreconditionError("mollify needs b > 1")
    kappa = float(np.min(np.abs(theta_prime.values)))
    if kappa <= 0:
        raise PreconditionError("|theta'| must be bounded below by kappa > 0")
    quotient = k / theta_prime
    a0, a1 = float(k.boxes.lo[0, 0]), float(k.boxes.hi[0, 0])
    h = min(k.spacing[0, 0], 2.0 / (b * min_kernel_nodes))
    m = int(math.ceil((a1 - a0) / h))
    h = (a1 - a0) / m
    half = int(math.floor(1.0 / (b * h)))
    fine_x = a0 + h * np.arange(-half, m + half + 1)
    fine = quotient.evaluate(np.clip(fine_x, a0, a1)[:, None], 0)
    z = h * np.arange(-half, half + 1)
    w = bump(b * z) * b * h
    w = w / w.sum()
    dw = bump_derivative(b * z) * b * b * h
    g_fine = fftconvolve(fine, w, mode="valid")
    # derivative kernel applied to (f(x - z) - f(x)) so constants map to zero
    dg_fine = fftconvolve(fine, dw, mode="valid") - fine[half:half + m + 1] * dw.sum()
    x_fine = a0 + h * np.arange(m + 1)
    xs = quotient.points()[0, :, 0]
    g = np.interp(xs, x_fine, g_fine.real) + (1j * np.interp(xs, x_fine, g_fine.imag) if np.iscomplexobj(g_fine) else 0)
    dg = np.interp(xs, x_fine, dg_fine.real) + (1j * np.interp(xs, x_fine, dg_fine.imag) if np.iscomplexobj(dg_fine) else 0)
    semi = holder_seminorm(quotient, alpha)
    err = float(np.max(np.abs(g_fine - fine[half:half + m + 1])))
    return MollifyResult(
        quotient.with_values(g[None]), quotient.with_values(dg[None]),
        err, float(np.max(np.abs(dg_fine))), semi,
        b ** -alpha * semi, 2 * b ** (1 - alpha) * semi, kappa)


# ---------------------------------------------------------------------------
# oscillatory integrals
# ---------------------------------------------------------------------------

_GL = {n: np.polynomial.legendre.leggauss(n) for n in (10, 20)}


def _gl(fn, a, b, n):
    x, w = _GL[n]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    pts = mid[:, None] + half[:, None] * x[None, :]
    return np.sum(fn(pts) * w[None, :], axis=1) * half


def adaptive_gauss(fn, a, b, panels, tol=1e-13, max_panels=2_000_000):
    """Integrate ``fn`` over [a, b] by 10/20-point Gauss–Legendre panel bisection.

    ``fn`` takes an array of nodes and returns values of the same shape.

    Raises
    ------
    NumericalError
        If the panel budget is exhausted before the error estimate meets ``tol``.
    """
    edges = np.linspace(a, b, panels + 1)
    lo, hi = edges[:-1], edges[1:]
    total = 0.0
    width = b - a
    while lo.size:
        coarse = _gl(fn, lo, hi, 10)
        fine = _gl(fn, lo, hi, 20)
        err = np.abs(fine - coarse)
        ok = err <= tol * (hi - lo) / width
        # round-off floor: panels too narrow to split further are accepted
        ok |= (hi - lo) < width * 1e-12
        total = total + np.sum(fine[ok])
        lo, hi = lo[~ok], hi[~ok]
        if lo.size:
            mid = 0.5 * (lo + hi)
            lo, hi = np.concatenate([lo, mid]), np.concatenate([mid, hi])
            order = np.argsort(lo, kind="stable")
            lo, hi = lo[order], hi[order]
            if lo.size > max_panels:
                raise NumericalError("oscillatory quadrature did not converge", float(err.max()))
    return total


@dataclass(frozen=True)
class OscIntResult:
    value: complex
    bound: float
    C: float
    kappa: float
    k_norm: float

    @property
    def bound_satisfied(self):
        return abs(self.value) <= self.bound


def _sample_seminorm(fn, a, b, alpha, n=4097):
    x = np.linspace(a, b, n)
    f = PiecewiseField(Boxes(np.array([[a]]), np.array([[b]])), np.asarray(fn(x))[None], alpha)
    return f.sup_norm(), holder_seminorm(f, alpha), x, f.values[0]


def oscillatory_integral(k, theta, dtheta, b, J=(0.0, 1.0), alpha=1.0, tol=1e-13, norm_grid=4097):
    """``int_J exp(i b theta(x)) k(x) dx`` with the integration-by-parts bound.

    Parameters
    ----------
    k, theta, dtheta : callable or PiecewiseField
        Functions of a 1-D array of abscissae.
    b : float
        Frequency, ``|b| > 1``.
    J : (float, float)
        Integration interval inside [0, 1].
    alpha : float
        Hölder exponent used for the norms in the bound.

    Returns
    -------
    OscIntResult
        ``bound = C kappa^-2 |b|^-alpha ||k||_{C^alpha(J)}`` with
        ``C = (||theta'||_inf + 6)(1 + |theta'|_alpha)``.
    """
    alpha = check_alpha(alpha)
    a0, a1 = map(float, J)
    if not (0.0 <= a0 < a1 <= 1.0):
        raise PreconditionError("J must be a non-empty subinterval of [0, 1]")
    if not abs(b) > 1:
        raise PreconditionError("oscillatory_integral needs |b| > 1")
    kf, tf, df = (_as_callable(fn) for fn in (k, theta, dtheta))
    dsup, dsemi, _, dvals = _sample_seminorm(df, a0, a1, alpha, norm_grid)
    kappa = float(np.min(np.abs(dvals)))
    if kappa <= 0:
        raise PreconditionError("|theta'| must be bounded below by kappa > 0 on J")
    ksup, ksemi, _, _ = _sample_seminorm(kf, a0, a1, alpha, norm_grid)
    period = 2 * np.pi / (abs(b) * dsup)
    panels = max(1, int(math.ceil((a1 - a0) / period)))
    val = adaptive_gauss(lambda x: np.exp(1j * b * tf(x)) * kf(x), a0, a1, panels, tol)
    C = (dsup + 6) * (1 + dsemi)
    knorm = ksup + ksemi
    bound = C * kappa ** -2 * abs(b) ** -alpha * knorm
    return OscIntResult(complex(val), float(bound), float(C), kappa, float(knorm))


def _as_callable(fn):
    if isinstance(fn, PiecewiseField):
        return lambda x: fn.evaluate(np.asarray(x)[..., None])
    if callable(fn):
        return lambda x: np.broadcast_to(fn(x), np.shape(x))
    c = complex(fn) if np.iscomplexobj(fn) else float(fn)
    return lambda x: np.full(np.shape(x), c)


def random_oscint_cases(count=100, seed=0, b_range=(2.0, 1000.0), kappa_range=(0.05, 1.0)):
    """Seeded ``(k, theta, theta', b, kappa)`` cases on [0, 1].

    ``k`` is a random trigonometric polynomial and
    ``theta'(x) = kappa + A (1 + sin(2 pi m x + p))`` so that
    ``min theta' = kappa`` up to sampling; ``|b|`` is log-uniform with a
    random sign.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        kappa = float(rng.uniform(*kappa_range))
        amp = float(rng.uniform(0.0, 2.0))
        m = int(rng.integers(1, 4))
        ph = float(rng.uniform(0, 2 * np.pi))
        b = float(np.exp(rng.uniform(np.log(b_range[0]), np.log(b_range[1])))) * float(rng.choice([-1.0, 1.0]))
        ck = rng.standard_normal(4)
        pk = rng.uniform(0, 2 * np.pi, 4)

        def k(x, ck=ck, pk=pk):
            return ck[0] + sum(ck[j] * np.cos(2 * np.pi * j * x + pk[j]) for j in range(1, 4))

        def theta(x, kappa=kappa, amp=amp, m=m, ph=ph):
            w = 2 * np.pi * m
            return kappa * x + amp * (x - (np.cos(w * x + ph) - np.cos(ph)) / w)

        def dtheta(x, kappa=kappa, amp=amp, m=m, ph=ph):
            return kappa + amp * (1 + np.sin(2 * np.pi * m * x + ph))

        cases.append({"k": k, "theta": theta, "dtheta": dtheta, "b": b, "kappa": kappa,
                      "amp": amp, "m": m})
    return cases
