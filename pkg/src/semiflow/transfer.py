"""Twisted transfer operators, invariant densities and (b)-norm decay scans."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_alpha, check_positive_int, check_random_state
from .errors import NumericalError, PreconditionError
from .holder import PiecewiseField, as_boxes, holder_seminorm
from .phase_space import (DEFAULT_WORD_BUDGET, reduce_preimages, system_constants)

DEFAULT_SIGMA = 0.01
DEFAULT_B0 = 10.0


# ---------------------------------------------------------------------------
# the operator
# ---------------------------------------------------------------------------

def _field_grid(f):
    pts = f.points()
    d = f.d
    y = pts.reshape(-1, d)
    elem = np.broadcast_to(np.arange(f.boxes.n_elements).reshape((-1,) + (1,) * d), pts.shape[:-1]).ravel()
    return y, elem


def _weights(blk, z):
    w = np.exp(blk.log_jac - z * blk.tau_sum)
    return np.where(blk.valid, w, 0.0)


def apply_twisted(tmap, roof, z, n, f: PiecewiseField, *, n_jobs=1, max_points=1 << 21,
                  word_budget=DEFAULT_WORD_BUDGET):
    """``L_z^n f`` evaluated at the grid points of ``f``.

    Every preimage is computed through the inverse branches; ``f`` is read
    off-grid by interpolation inside the element given by the word's last
    letter.  ``n = 0`` returns ``f`` unchanged.

    Raises
    ------
    ResourceError
        If the number of branch words of length ``n`` exceeds ``word_budget``.
    """
    n = check_positive_int(n, "n", 0)
    if n == 0:
        return f
    y, y_elem = _field_grid(f)
    z = complex(z)

    def visit(blk):
        if blk.level != n:
            return None
        vals = f.evaluate(blk.x, blk.last[:, None])
        w = _weights(blk, z) if z.imag else np.where(blk.valid, np.exp(blk.log_jac - z.real * blk.tau_sum), 0.0)
        return np.sum(w * vals, axis=0)

    out = reduce_preimages(tmap, roof, y, n, visit, y_elem=y_elem, max_points=max_points,
                           n_jobs=n_jobs, word_budget=word_budget)
    return f.with_values(out[n].reshape(f.values.shape))


def twisted_images(tmap, roof, zs, n_max, y, y_elem, basis, *, n_jobs=1, max_points=1 << 18,
                   word_budget=DEFAULT_WORD_BUDGET):
    """``L_z^n e_k`` at points ``y`` for every ``z`` in ``zs``, ``n <= n_max`` and basis function ``e_k``.

    ``basis(x, elem)`` returns an array of shape ``(K,) + x.shape[:-1]``.
    Returns an array of shape ``(n_max, len(zs), K, len(y))``; row ``n-1``
    holds the ``n``-th iterate.
    """
    zs = np.asarray(zs, complex)

    def visit(blk):
        e = basis(blk.x, np.broadcast_to(blk.last[:, None], blk.x.shape[:-1]))
        out = []
        for z in zs:
            w = _weights(blk, z)
            out.append(np.einsum("wg,kwg->kg", w, e))
        return np.stack(out)

    levels = reduce_preimages(tmap, roof, y, n_max, visit, y_elem=y_elem, max_points=max_points,
                              n_jobs=n_jobs, word_budget=word_budget)
    return np.stack([levels[k] for k in range(1, n_max + 1)])


# ---------------------------------------------------------------------------
# invariant density
# ---------------------------------------------------------------------------

def invariant_density(tmap, roof=None, resolution=None, tol=1e-10, max_iter=500, floor=1e-12):
    """Power iteration of ``L_0`` from ``f = 1`` until successive iterates agree to ``tol``.

    Returns
    -------
    PiecewiseField
        ``h`` with ``int h dm = 1``.

    Raises
    ------
    NumericalError
        On non-convergence (carrying the last residual) or if ``h`` drops
        below ``floor``.
    """
    from .phase_space import constant_roof

    roof = constant_roof(1.0) if roof is None else roof
    h = PiecewiseField.constant(tmap, 1.0 / tmap.measure, resolution)
    res = np.inf
    for _ in range(max_iter):
        nxt = apply_twisted(tmap, roof, 0.0, 1, h)
        nxt = nxt * (1.0 / nxt.integral())
        res = float(np.max(np.abs(nxt.values - h.values)))
        h = nxt
        if res < tol:
            break
    else:
        raise NumericalError("invariant density power iteration did not converge", res)
    if h.values.min() < floor:
        raise NumericalError(f"invariant density falls below the positive floor {floor}", float(h.values.min()))
    return h


class InvariantDensityEstimator(BaseEstimator):
    """Estimator wrapper around :func:`invariant_density`."""

    def __init__(self, resolution=None, tol=1e-10, max_iter=500):
        self.resolution = resolution
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, tmap, roof=None):
        self.density_ = invariant_density(tmap, roof, self.resolution, self.tol, self.max_iter)
        return self

    def predict(self, x):
        return self.density_.evaluate(x)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def fourier_modes(d, band):
    k = np.arange(-band, band + 1)
    if d == 1:
        return k[:, None]
    return np.stack(np.meshgrid(k, k, indexing="ij"), -1).reshape(-1, 2)


def fourier_basis(tmap, band):
    """Callable evaluating ``exp(2 pi i k.u)`` in unit coordinates of X for all modes ``|k_i| <= band``."""
    modes = fourier_modes(tmap.d, band)
    lo, w = tmap.lo, tmap.hi - tmap.lo

    def basis(x, elem=None):
        u = (x - lo) / w
        phase = np.tensordot(modes, u, axes=([1], [u.ndim - 1]))
        return np.exp(2j * np.pi * phase)

    return basis, modes


def random_probe_coefficients(modes, n_probes, seed=0):
    """Complex Gaussian coefficients damped as ``1/(1+|k|)``; row 0 is the constant probe."""
    rng = check_random_state(seed)
    scale = 1.0 / (1.0 + np.linalg.norm(modes, axis=1))
    c = (rng.standard_normal((n_probes, len(modes))) + 1j * rng.standard_normal((n_probes, len(modes)))) * scale
    const = (np.abs(modes).sum(axis=1) == 0).astype(complex)
    return np.vstack([const, c])


def trig_probes(tmap, n_probes=20, band=4, resolution=None, seed=0, real=True, alpha=1.0):
    """Seeded band-limited trigonometric fields on the grid of ``tmap``."""
    basis, modes = fourier_basis(tmap, band)
    coef = random_probe_coefficients(modes, n_probes, seed)[1:]
    one = PiecewiseField.constant(tmap, 0.0, resolution, alpha)
    y = one.points()
    vals = np.tensordot(coef, basis(y), axes=1)
    if real:
        vals = vals.real
    return [one.with_values(v) for v in vals]


# ---------------------------------------------------------------------------
# Lasota–Yorke measurement
# ---------------------------------------------------------------------------

@dataclass
class LYReport:
    """Least single constant on the probes versus the constant implied by the proof."""

    z: complex
    n: int
    A: float
    B: float
    C_proof: float
    sup_L_a: float
    adapted_ratio: float
    adapted_C: float
    violations: int
    per_probe: list = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0


def ly_proof_constant(constants, alpha, z, n, S, sigma=DEFAULT_SIGMA):
    """Single constant implied by the term-by-term Lasota–Yorke estimate.

    With ``S = sup L_a^n 1`` and ``E = exp(|a| C5/2)`` the proof gives
    ``||L f||_{C^alpha} <= S (1 + E(|a| C5/2 + 2|b|^alpha (C5/2)^alpha + C6 e^C6)) ||f||_inf
    + S E e^C6 e^{-alpha lambda n} |f|_alpha``, which is rewritten in the
    two-term form with a common constant.
    """
    a, b = z.real, z.imag
    C5, C6 = constants.C5, constants.C6
    E = math.exp(abs(a) * C5 / 2)
    ba = abs(b) ** alpha
    sup_coef = S * (1 + E * (abs(a) * C5 / 2 + 2 * ba * (C5 / 2) ** alpha + C6 * math.exp(C6)))
    semi_coef = S * E * math.exp(C6)
    return max(semi_coef * math.exp(-sigma * n), sup_coef / (math.exp(sigma * n) * (1 + ba)))


def _ly_report(fields, images, z, n, S, constants, alpha, sigma):
    lam = constants.lam
    ba = abs(z.imag) ** alpha
    C_proof = ly_proof_constant(constants, alpha, z, n, S, sigma)
    worst, adapted_worst, violations, rows = 0.0, 0.0, 0, []
    for f, g in zip(fields, images):
        fs, fsemi = f.sup_norm(), holder_seminorm(f, alpha)
        gs, gsemi = g.sup_norm(), holder_seminorm(g, alpha)
        denom = math.exp(-(alpha * lam - sigma) * n) * fsemi + math.exp(sigma * n) * (1 + ba) * fs
        ratio = (gs + gsemi) / denom
        fb = fsemi / (1 + ba) + fsemi + fs
        gb = gsemi / (1 + ba) + gsemi + gs
        aratio = gb / (2 * math.exp(sigma * n) * (math.exp(-alpha * lam * n) * fb + (1 + ba) * fs))
        worst = max(worst, ratio)
        adapted_worst = max(adapted_worst, aratio)
        violations += int(ratio > C_proof or aratio > C_proof)
        rows.append({"lhs": gs + gsemi, "denominator": denom, "ratio": ratio, "adapted_ratio": aratio})
    return LYReport(z, n, worst, worst, C_proof, S, adapted_worst, C_proof, violations, rows)


def _check_twist(z, sigma):
    z = complex(z)
    if z.real <= -sigma:
        raise PreconditionError(f"Re z = {z.real} must exceed -sigma = {-sigma}")
    return z


def ly_constants(tmap, roof, z, n, probes, sigma=DEFAULT_SIGMA, alpha=None, constants=None, n_jobs=1):
    """Measure ``||L_z^n f||_{C^alpha}`` against the two-term Lasota–Yorke form.

    The returned ``A = B`` is the least single constant making
    ``||L f|| <= A e^{-(alpha lambda - sigma) n}|f|_alpha + B e^{sigma n}(1+|b|^alpha)||f||_inf``
    hold on every probe.  It is compared with :func:`ly_proof_constant`,
    evaluated with the measured system constants.  The adapted (b)-norm
    estimate is checked in the form
    ``||L f||_(b) <= 2 C e^{sigma n}(e^{-alpha lambda n}||f||_(b) + (1+|b|^alpha)||f||_inf)``.
    """
    z = _check_twist(z, sigma)
    if not probes:
        raise PreconditionError("ly_constants needs at least one probe")
    const = system_constants(tmap, roof) if constants is None else constants
    alpha = check_alpha(roof.alpha if alpha is None else alpha)
    one = probes[0].with_values(np.ones(probes[0].values.shape))
    S = float(np.max(np.abs(apply_twisted(tmap, roof, z.real, n, one, n_jobs=n_jobs).values)))
    images = [apply_twisted(tmap, roof, z, n, f, n_jobs=n_jobs) for f in probes]
    return _ly_report(probes, images, z, n, S, const, alpha, sigma)


def ly_suite(tmap, roof, zs, n_list, n_probes=20, band=4, resolution=512, seed=0, sigma=DEFAULT_SIGMA,
             constants=None, n_jobs=1):
    """Lasota–Yorke reports for every ``(z, n)`` on seeded real trigonometric probes.

    One preimage walk serves all ``z``, ``n`` and probes: the probes are
    real combinations of Fourier modes whose images are computed exactly at
    the grid points.
    """
    zs = [_check_twist(z, sigma) for z in zs]
    const = system_constants(tmap, roof) if constants is None else constants
    alpha = roof.alpha
    n_list = sorted(int(n) for n in n_list)
    basis, modes = fourier_basis(tmap, band)
    coef = random_probe_coefficients(modes, n_probes, seed)[1:]
    # real probes: symmetrize the coefficients of k and -k
    mirror = np.array([int(np.nonzero(np.all(modes == -k, axis=1))[0][0]) for k in modes])
    coef = 0.5 * (coef + np.conj(coef[:, mirror]))
    template = PiecewiseField.constant(tmap, 0.0, resolution, alpha)
    y, y_elem = _field_grid(template)
    k0 = int(np.nonzero(np.all(modes == 0, axis=1))[0][0])
    twists = list(zs) + sorted({complex(z.real) for z in zs}, key=lambda c: c.real)
    imgs = twisted_images(tmap, roof, twists, max(n_list), y, y_elem, basis, n_jobs=n_jobs)
    shape = template.values.shape
    fields = [template.with_values((c @ basis(y)).real.reshape(shape)) for c in coef]
    out = []
    for i, z in enumerate(zs):
        ia = twists.index(complex(z.real), len(zs))
        for n in n_list:
            S = float(np.max(np.abs(imgs[n - 1, ia, k0])))
            images = [template.with_values((c @ imgs[n - 1, i]).reshape(shape)) for c in coef]
            out.append(_ly_report(fields, images, z, n, S, const, alpha, sigma))
    return out


# ---------------------------------------------------------------------------
# decay scan
# ---------------------------------------------------------------------------

def schedule(constants, alpha, B=None, b0=DEFAULT_B0, sigma=DEFAULT_SIGMA, beta1=None, beta2=None, q=None):
    """Dolgopyat schedule constants: ``beta1 = 2/lambda``, ``beta2 = alpha/(8 Lambda)``, ``q = alpha lambda/2``.

    ``B`` defaults to ``4 (beta1 + beta2)``; any constant may be overridden.
    """
    beta1 = 2 / constants.lam if beta1 is None else float(beta1)
    beta2 = alpha / (8 * constants.Lam) if beta2 is None else float(beta2)
    q = alpha * constants.lam / 2 if q is None else float(q)
    return {"beta1": beta1, "beta2": beta2, "q": q,
            "B": 4 * (beta1 + beta2) if B is None else float(B), "b0": float(b0), "sigma": float(sigma)}


@dataclass
class DecayScanResult:
    """Probe-maximized (b)-norm ratios per (b, n) cell and fitted decay rates."""

    b_list: list
    n_list: list
    a: float
    ratio: np.ndarray
    zeta: dict
    windows: dict
    schedule: dict
    n1: dict
    n2: dict
    flags: dict
    metadata: dict = field(default_factory=dict)

    @property
    def min_zeta(self):
        vals = [v for v in self.zeta.values() if np.isfinite(v)]
        return min(vals) if vals else float("nan")

    def rows(self):
        for i, b in enumerate(self.b_list):
            for j, n in enumerate(self.n_list):
                yield b, n, float(self.ratio[i, j]), self.zeta[b]

    def summary(self):
        return {
            "a": self.a, "b_list": list(self.b_list), "n_list": list(self.n_list),
            "zeta": {repr(b): v for b, v in self.zeta.items()}, "min_zeta": self.min_zeta,
            "windows": {repr(b): w for b, w in self.windows.items()},
            "n1": {repr(b): v for b, v in self.n1.items()}, "n2": {repr(b): v for b, v in self.n2.items()},
            "schedule": dict(self.schedule), "flags": {repr(b): v for b, v in self.flags.items()},
            "metadata": dict(self.metadata),
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _b_norms(values, shape, boxes, alpha, b):
    """(b)-norms of a stack of fields given as flat grid values."""
    out = np.empty(values.shape[0])
    for i, v in enumerate(values):
        f = PiecewiseField(boxes, v.reshape(shape), alpha)
        s = holder_seminorm(f, alpha)
        out[i] = s / (1 + abs(b) ** alpha) + s + f.sup_norm()
    return out


def fit_zeta(n_list, ratios, n_min):
    """``-`` least-squares slope of ``log ratio`` against ``n`` over ``n >= n_min``."""
    n = np.asarray(n_list, float)
    r = np.asarray(ratios, float)
    m = (n >= n_min) & np.isfinite(r) & (r > 0)
    if m.sum() < 2:
        return float("nan"), []
    slope = np.polyfit(n[m], np.log(r[m]), 1)[0]
    return float(-slope), [int(v) for v in n[m]]


def norm_decay_scan(tmap, roof, a=0.0, b_list=(10.0, 20.0, 40.0, 80.0), n_list=tuple(range(0, 15)), *,
                    n_probes=32, band=None, resolution=512, seed=0, recycle_n=2, B=None,
                    b0=DEFAULT_B0, sigma=DEFAULT_SIGMA, zeta_tol=1e-6, n_jobs=1,
                    word_budget=DEFAULT_WORD_BUDGET, constants=None, beta1=None, beta2=None, q=None):
    """Estimate the contraction of ``L_{a+ib}^n`` in the (b)-norm.

    For each ``b`` the ratio ``||L^n f||_(b) / ||f||_(b)`` is maximized over
    the constant field, ``n_probes`` seeded band-limited trigonometric
    fields, and the recycled iterate ``L^{recycle_n} f*`` of the worst probe.
    The decay rate ``zeta(b)`` is minus the least-squares slope of
    ``log ratio`` over the cells with ``n >= floor(B ln|b|)``.  Ratios are
    lower bounds for the operator norm, never certificates.

    Returns
    -------
    DecayScanResult
    """
    const = system_constants(tmap, roof) if constants is None else constants
    alpha = roof.alpha
    sched = schedule(const, alpha, B, b0, sigma, beta1, beta2, q)
    if a <= -sigma:
        raise PreconditionError(f"a = {a} must exceed -sigma = {-sigma}")
    b_list = [float(b) for b in b_list]
    n_list = sorted(int(n) for n in n_list)
    n_max = max(n_list)
    band = (6 if tmap.d == 1 else 2) if band is None else band
    template = PiecewiseField.constant(tmap, 0.0, resolution, alpha)
    shape = template.values.shape
    boxes = as_boxes(tmap)
    y, y_elem = _field_grid(template)
    basis, modes = fourier_basis(tmap, band)
    coef = random_probe_coefficients(modes, n_probes, seed)
    zs = [complex(a, b) for b in b_list]
    e0 = basis(y)
    probes0 = coef @ e0
    ratio = np.ones((len(b_list), len(n_list)))
    meta = {"probe_count": int(coef.shape[0]) + 1, "band": band, "resolution": resolution, "seed": seed,
            "recycle_n": recycle_n, "interpolation": "probe images exact at grid points; recycled iterate "
            "read off-grid by linear interpolation",
            "caveat": "probes enforce the schedule's regularity hypothesis only approximately"}
    if n_max >= 1:
        imgs = twisted_images(tmap, roof, zs, n_max, y, y_elem, basis, n_jobs=n_jobs, word_budget=word_budget)
    for i, b in enumerate(b_list):
        base = _b_norms(probes0, shape, boxes, alpha, b)
        best = np.ones(len(n_list))
        worst_idx = 0
        for j, n in enumerate(n_list):
            if n == 0:
                continue
            it = coef @ imgs[n - 1, i]
            r = _b_norms(it, shape, boxes, alpha, b) / base
            best[j] = r.max()
            if n == recycle_n:
                worst_idx = int(np.argmax(r))
        if n_max >= 1 and recycle_n >= 1 and recycle_n <= n_max:
            star_vals = (coef[worst_idx] @ imgs[recycle_n - 1, i]).reshape(shape)
            star = template.with_values(star_vals)
            star_norm = _b_norms(star_vals.reshape(1, -1), shape, boxes, alpha, b)[0]
            star_imgs = _recycled_images(tmap, roof, zs[i], n_max, star, y, y_elem, n_jobs, word_budget)
            for j, n in enumerate(n_list):
                if n >= 1:
                    rs = _b_norms(star_imgs[n - 1][None], shape, boxes, alpha, b)[0] / star_norm
                    best[j] = max(best[j], rs)
        ratio[i] = best
    zeta, windows, n1, n2, flags = {}, {}, {}, {}, {}
    for i, b in enumerate(b_list):
        n_min = math.floor(sched["B"] * math.log(abs(b)))
        zeta[b], windows[b] = fit_zeta(n_list, ratio[i], n_min)
        n1[b] = math.floor(sched["beta1"] * math.log(abs(b)))
        n2[b] = math.floor(sched["beta2"] * math.log(abs(b)))
        fl = []
        if not np.isfinite(zeta[b]):
            fl.append("empty_window")
        elif zeta[b] <= zeta_tol:
            fl.append("no_contraction")
        if abs(b) < b0:
            fl.append("below_b0")
        flags[b] = fl
    return DecayScanResult(b_list, n_list, float(a), ratio, zeta, windows, sched, n1, n2, flags, meta)


def _recycled_images(tmap, roof, z, n_max, star, y, y_elem, n_jobs, word_budget):
    def basis(x, elem):
        return star.evaluate(x, elem)[None]

    imgs = twisted_images(tmap, roof, [z], n_max, y, y_elem, basis, n_jobs=n_jobs, word_budget=word_budget)
    return imgs[:, 0, 0]


class NormDecayScan(BaseEstimator):
    """Estimator wrapper around :func:`norm_decay_scan`; ``fit(map, roof)`` sets ``result_`` and ``zeta_``."""

    def __init__(self, a=0.0, b_list=(10.0, 20.0, 40.0, 80.0), n_list=tuple(range(0, 15)), n_probes=32,
                 band=None, resolution=512, seed=0, B=None, b0=DEFAULT_B0, sigma=DEFAULT_SIGMA, n_jobs=1):
        self.a = a
        self.b_list = b_list
        self.n_list = n_list
        self.n_probes = n_probes
        self.band = band
        self.resolution = resolution
        self.seed = seed
        self.B = B
        self.b0 = b0
        self.sigma = sigma
        self.n_jobs = n_jobs

    def fit(self, tmap, roof):
        self.result_ = norm_decay_scan(
            tmap, roof, self.a, self.b_list, self.n_list, n_probes=self.n_probes, band=self.band,
            resolution=self.resolution, seed=self.seed, B=self.B, b0=self.b0, sigma=self.sigma,
            n_jobs=self.n_jobs)
        self.zeta_ = dict(self.result_.zeta)
        return self


# ---------------------------------------------------------------------------
# pairwise cancellation (d = 1)
# ---------------------------------------------------------------------------

@dataclass
class CancellationTable:
    """Pair integrals split by transversality of the image cones at element midpoints."""

    b: float
    n1: int
    n2: int
    words: np.ndarray
    integrals: np.ndarray
    transversal: np.ndarray
    osc_bounds: np.ndarray
    transversal_subtotal: float
    transversal_sum_abs: float
    nontransversal_subtotal: float
    nontransversal_mass: float
    total_mass: float
    bound_violations: int


def _simpson_weights(g, h):
    w = np.ones(g)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return w * h / 3


def pairwise_cancellation(tmap, roof, b, n1, n2, f=None, a=0.0, resolution=4097, bound_resolution=513,
                          constants=None, word_budget=DEFAULT_WORD_BUDGET, pair_chunk=2048):
    """Table of ``int K_w K_v exp(-i b (tau_n o ell_w - tau_n o ell_v))`` over word pairs.

    ``K_w = (J_n f e^{-a tau_n}) o ell_w``.  Pairs are integrated over each
    image element they share, by Simpson's rule on ``resolution`` nodes.
    Each transversal pair also gets the oscillatory-integral bound with
    ``kappa = min |theta'|``.

    Returns
    -------
    CancellationTable
    """
    from .transversality import transversal_1d

    if tmap.d != 1:
        raise PreconditionError("pairwise_cancellation is implemented for d = 1 only")
    if resolution % 2 == 0:
        resolution += 1
    const = system_constants(tmap, roof) if constants is None else constants
    alpha = roof.alpha
    n = int(n1) + int(n2)
    C5 = const.cone_width
    ints, trans, bounds, words_all = [], [], [], []
    nt_mass, tot_mass, violations = 0.0, 0.0, 0
    for e, br in enumerate(tmap.branches):
        ys = np.linspace(br.lo[0], br.hi[0], resolution)
        h = ys[1] - ys[0]
        blocks = []

        def visit(blk):
            if blk.level == n:
                blocks.append(blk)

        grid = np.concatenate([ys, [0.5 * (br.lo[0] + br.hi[0])]])
        reduce_preimages(tmap, roof, grid[:, None], n, visit, y_elem=np.full(grid.size, e), derivatives=True,
                         max_points=1 << 62, word_budget=word_budget)
        blk = blocks[0]
        keep = blk.valid[:, 0]
        if not np.any(keep):
            continue
        words = blk.words[keep]
        fv = np.ones(blk.x.shape[:-1]) if f is None else (
            f.evaluate(blk.x, blk.last[:, None]) if isinstance(f, PiecewiseField) else f(blk.x[..., 0]))
        K = (np.exp(blk.log_jac - a * blk.tau_sum) * fv)[keep]
        tau = blk.tau_sum[keep]
        s = blk.dtau[keep][..., 0]
        A = blk.dl[keep][..., 0, 0]
        Kg, taug, sg = K[:, :-1], tau[:, :-1], s[:, :-1]
        sw = _simpson_weights(resolution, h)
        M = Kg * np.exp(-1j * b * taug) * np.sqrt(sw)[None]
        I = M @ M.conj().T
        absK = np.abs(Kg) * np.sqrt(sw)[None]
        mass = absK @ absK.T
        tr = transversal_1d(s[:, -1][:, None], A[:, -1][:, None], s[:, -1][None, :], A[:, -1][None, :], C5)
        np.fill_diagonal(tr, False)
        stride = max(1, (resolution - 1) // (bound_resolution - 1))
        bnd = np.zeros(I.shape)
        iu, ju = np.nonzero(np.triu(tr))
        for c in range(0, iu.size, pair_chunk):
            p, q = iu[c:c + pair_chunk], ju[c:c + pair_chunk]
            dth = (sg[p] - sg[q])[:, ::stride]
            kk = (Kg[p] * Kg[q])[:, ::stride]
            hb = h * stride
            kappa = np.min(np.abs(dth), axis=1)
            semi_d = _dyadic_semi(dth, hb, alpha)
            knorm = np.max(np.abs(kk), axis=1) + _dyadic_semi(kk, hb, alpha)
            with np.errstate(divide="ignore"):
                val = (np.max(np.abs(dth), axis=1) + 6) * (1 + semi_d) * kappa ** -2.0 * abs(b) ** -alpha * knorm
            bnd[p, q] = bnd[q, p] = val
        violations += int(np.sum(np.abs(I)[tr] > bnd[tr] * (1 + 1e-9)))
        nt_mass += float(mass[~tr].sum())
        tot_mass += float(mass.sum())
        ints.append(I)
        trans.append(tr)
        bounds.append(bnd)
        words_all.append(words)
    t_sub = sum(complex(I[t].sum()) for I, t in zip(ints, trans))
    t_abs = sum(float(np.abs(I[t]).sum()) for I, t in zip(ints, trans))
    nt_sub = sum(complex(I[~t].sum()) for I, t in zip(ints, trans))
    return CancellationTable(float(b), int(n1), int(n2), words_all, ints, trans, bounds,
                             abs(t_sub), t_abs, abs(nt_sub), nt_mass, tot_mass, violations)


def _dyadic_semi(v, h, alpha):
    """Row-wise dyadic-pair Hölder seminorm of sampled functions with spacing ``h``."""
    best = np.zeros(v.shape[0])
    s = 1
    while s < v.shape[1]:
        best = np.maximum(best, np.max(np.abs(v[:, s:] - v[:, :-s]), axis=1) / (s * h) ** alpha)
        s *= 2
    return best


# ---------------------------------------------------------------------------
# sup-norm interpolation inequality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SupInterpolation:
    """Measured norms of the sup-norm interpolation inequality."""

    sup: float
    l1: float
    seminorm: float
    eps: float
    C: float
    d: int = 1
    alpha: float = 1.0

    @property
    def rhs(self):
        return self.C * self.eps ** -self.d * self.l1 + self.eps ** self.alpha * self.seminorm

    @property
    def holds(self):
        return self.sup <= self.rhs


def sup_interpolation_constant(d):
    """``C = (2 sqrt d)^d``; a cube of side ``eps/sqrt d`` fits in every element for ``eps < eps0``."""
    return (2 * math.sqrt(d)) ** d


def sup_interpolation_check(f: PiecewiseField, eps, alpha=None):
    """Check ``||f||_inf <= C eps^-d ||f||_{L^1} + eps^alpha |f|_alpha`` for ``0 < eps < eps0``.

    ``eps0`` is the smallest side of any partition element.
    """
    alpha = check_alpha(f.alpha if alpha is None else alpha)
    eps0 = float(np.min(f.boxes.hi - f.boxes.lo))
    if not 0 < eps < eps0:
        raise PreconditionError(f"eps must lie in (0, {eps0})")
    return SupInterpolation(f.sup_norm(), f.l1_norm(), holder_seminorm(f, alpha), float(eps),
                            sup_interpolation_constant(f.d), f.d, alpha)
