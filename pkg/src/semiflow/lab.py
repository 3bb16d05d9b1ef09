"""Suspension semiflow simulation and Monte-Carlo correlation decay."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import as_points, check_positive, check_positive_int
from .errors import ConfigError, FitError, PreconditionError
from .holder import PiecewiseField

N_BLOCKS = 100
MIN_ACCEPTANCE = 0.01


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowState:
    """Points ``(x, u)`` of the suspension with ``0 <= u < tau(x)``."""

    x: np.ndarray
    u: np.ndarray

    def __len__(self):
        return self.u.shape[0]

    def take(self, idx):
        return FlowState(self.x[idx], self.u[idx])


def make_state(tmap, x, u):
    x = as_points(x, tmap.d).reshape(-1, tmap.d)
    u = np.broadcast_to(np.asarray(u, float), x.shape[:1]).copy()
    return FlowState(x, u)


def flow_step(tmap, roof, s: FlowState, t, max_steps=None):
    """Advance every state by time ``t >= 0``.

    The fiber coordinate grows by ``t``; while ``u >= tau(x)`` the base point
    moves to ``T x`` and ``u`` drops by ``tau(x)``.
    """
    t = float(t)
    if t < 0:
        raise PreconditionError("flow_step needs t >= 0")
    x = s.x.copy()
    u = s.u + t
    elem = tmap.element_of(x)
    tau = roof.value(x, elem)
    active = np.nonzero(u >= tau)[0]
    steps = 0
    while active.size:
        xa = x[active]
        ea = elem[active]
        u[active] -= tau[active]
        xa = tmap.forward(xa, ea)
        # forward images can overshoot the closed box by one ulp
        xa = np.clip(xa, tmap.lo, tmap.hi)
        x[active] = xa
        elem[active] = tmap.element_of(xa)
        tau[active] = roof.value(xa, elem[active])
        active = active[u[active] >= tau[active]]
        steps += 1
        if max_steps is not None and steps > max_steps:
            raise PreconditionError("flow_step exceeded its step limit")
    return FlowState(x, u)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _envelope(tmap, roof, density):
    pts = density.points()
    elem = np.broadcast_to(np.arange(tmap.n_elements).reshape((-1,) + (1,) * tmap.d), pts.shape[:-1])
    ht = density.values * roof.value(pts, elem)
    return float(ht.max()) * 1.001, float(ht.mean())


def _sample_block(tmap, roof, density, count, rng, envelope):
    xs, filled, tries = [], 0, 0
    while filled < count:
        m = max(2 * (count - filled), 1024)
        x = tmap.lo + rng.random((m, tmap.d)) * (tmap.hi - tmap.lo)
        acc = rng.random(m) * envelope
        e = tmap.element_of(x)
        w = density.evaluate(x, e) * roof.value(x, e)
        keep = x[acc < w]
        xs.append(keep[: count - filled])
        filled += min(keep.shape[0], count - filled)
        tries += m
    x = np.concatenate(xs)
    tau = roof.value(x, tmap.element_of(x))
    u = rng.random(count) * tau
    return FlowState(x, u)


def _block_sizes(n, blocks):
    base, extra = divmod(n, blocks)
    return [base + (1 if i < extra else 0) for i in range(blocks)]


def _block_rngs(seed, blocks):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(blocks)]


def sample_nu_tau(tmap, roof, density: PiecewiseField, N, seed=0, n_blocks=N_BLOCKS, n_jobs=1):
    """Draw ``N`` states from the suspension measure.

    Base points have density proportional to ``h tau`` (rejection against
    the constant envelope ``max h tau``); fibers are uniform on
    ``[0, tau(x))``.  Each of ``n_blocks`` blocks has its own stream spawned
    from ``seed``, so the result does not depend on ``n_jobs``.

    Raises
    ------
    ConfigError
        If the rejection acceptance rate is below 1%.
    """
    N = check_positive_int(N, "N")
    envelope, mean = _envelope(tmap, roof, density)
    if mean / envelope < MIN_ACCEPTANCE:
        raise ConfigError(f"rejection acceptance {mean / envelope:.3g} is below 1%; reshape the roof or density",
                          "mc.N")
    blocks = _blocks(tmap, roof, density, N, seed, n_blocks, n_jobs, envelope)
    return FlowState(np.concatenate([b.x for b in blocks]), np.concatenate([b.u for b in blocks]))


def _blocks(tmap, roof, density, N, seed, n_blocks, n_jobs, envelope):
    sizes = _block_sizes(N, n_blocks)
    rngs = _block_rngs(seed, n_blocks)
    work = lambda i: _sample_block(tmap, roof, density, sizes[i], rngs[i], envelope)
    return _map(work, range(n_blocks), n_jobs)


def _map(fn, items, n_jobs):
    items = list(items)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Observable:
    """Function ``f(x, u, tau(x))`` on the suspension."""

    fn: Callable
    name: str = "custom"

    def __call__(self, x, u, tau):
        return self.fn(x, u, tau)


def base_trig(k=1, lo=0.0, width=1.0):
    """``sin(2 pi k x)`` in the first unit coordinate."""
    return Observable(lambda x, u, tau: np.sin(2 * np.pi * k * (x[:, 0] - lo) / width), f"sin(2pi*{k}x)")


def fiber_fourier(m=1):
    """``exp(2 pi i m u)``."""
    return Observable(lambda x, u, tau: np.exp(2j * np.pi * m * u), f"exp(2pi i {m} u)")


def fiber_bump(base: Observable, p=4):
    """``base(x) sin(pi u / tau(x))^(2p)``; smooth across the roof identification."""
    return Observable(lambda x, u, tau: base(x, u, tau) * np.sin(np.pi * u / tau) ** (2 * p),
                      f"{base.name}*bump{p}")


def constant_observable(c=1.0):
    return Observable(lambda x, u, tau: np.full(u.shape, c), f"const({c})")


def shifted(obs: Observable, c):
    return Observable(lambda x, u, tau: obs(x, u, tau) + c, f"{obs.name}+{c}")


OBSERVABLES = {
    "sin_bump": lambda p=4: fiber_bump(base_trig(1), int(p)),
    "fiber_fourier": lambda m=1: fiber_fourier(int(m)),
    "fiber_fourier_conj": lambda m=1: fiber_fourier(-int(m)),
    "constant": lambda c=1.0: constant_observable(float(c)),
    "sin": lambda k=1: base_trig(int(k)),
}


def make_observable(name, params=()):
    try:
        return OBSERVABLES[name](*params)
    except KeyError:
        raise PreconditionError(f"unknown observable {name!r}; catalog: {sorted(OBSERVABLES)}") from None


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------

@dataclass
class CorrelationCurve:
    """Estimated ``C(t) = int f g o T_t - int f int g o T_t`` with jackknife errors."""

    t: np.ndarray
    C: np.ndarray
    se: np.ndarray
    N: int
    seed: int
    variance_f: Optional[complex] = None
    metadata: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "re_C", "im_C", "stderr"])
        for t, c, s in zip(self.t, self.C, self.se):
            c = complex(c)
            w.writerow([f"{t:.17g}", f"{c.real:.17g}", f"{c.imag:.17g}", f"{s:.17g}"])
        return buf.getvalue()


def _block_sums(tmap, roof, f, g, t_grid, state):
    n = len(state)
    tau0 = roof.value(state.x, tmap.element_of(state.x))
    fv = f(state.x, state.u, tau0)
    out_fg, out_g = [], []
    prev = 0.0
    s = state
    for t in t_grid:
        s = flow_step(tmap, roof, s, t - prev)
        prev = t
        tau = roof.value(s.x, tmap.element_of(s.x))
        gv = g(s.x, s.u, tau)
        out_fg.append(np.sum(fv * gv))
        out_g.append(np.sum(gv))
    return n, np.sum(fv), np.array(out_fg), np.array(out_g), np.sum(fv * fv), np.sum(fv)


def mc_correlation(tmap, roof, f: Observable, g: Observable, t_grid, N, seed=0, density=None,
                   n_blocks=N_BLOCKS, n_jobs=1):
    """Monte-Carlo correlation curve under the suspension measure.

    ``C(t) = mean(f g_t) - mean(f) mean(g_t)`` so adding constants to ``f``
    or ``g`` leaves the estimate unchanged up to rounding.  Standard errors
    come from a delete-one-block jackknife over ``n_blocks`` blocks, each
    drawn from its own seed stream.
    """
    from .transfer import invariant_density

    t_grid = np.asarray(sorted(float(t) for t in t_grid))
    if t_grid.size == 0 or t_grid[0] < 0:
        raise PreconditionError("t_grid must be non-empty with t >= 0")
    density = invariant_density(tmap) if density is None else density
    envelope, mean = _envelope(tmap, roof, density)
    if mean / envelope < MIN_ACCEPTANCE:
        raise ConfigError("rejection acceptance below 1%", "mc.N")
    sizes = _block_sizes(check_positive_int(N, "N"), n_blocks)
    rngs = _block_rngs(seed, n_blocks)

    def work(i):
        st = _sample_block(tmap, roof, density, sizes[i], rngs[i], envelope)
        return _block_sums(tmap, roof, f, g, t_grid, st)

    parts = _map(work, range(n_blocks), n_jobs)
    n = np.array([p[0] for p in parts], float)
    sf = np.array([p[1] for p in parts])
    sfg = np.stack([p[2] for p in parts])
    sg = np.stack([p[3] for p in parts])
    sff = np.array([p[4] for p in parts])

    def estimate(nn, a, b, c):
        return b / nn - (a / nn) * (c / nn)

    total = estimate(n.sum(), sf.sum(), sfg.sum(0), sg.sum(0))
    jack = np.stack([estimate(n.sum() - n[j], sf.sum() - sf[j], sfg.sum(0) - sfg[j], sg.sum(0) - sg[j])
                     for j in range(n_blocks)])
    B = n_blocks
    se = np.sqrt((B - 1) / B * np.sum(np.abs(jack - jack.mean(0)) ** 2, axis=0))
    var_f = sff.sum() / n.sum() - (sf.sum() / n.sum()) ** 2
    return CorrelationCurve(t_grid, total, se, int(n.sum()), seed, complex(var_f),
                            {"n_blocks": n_blocks, "observables": [f.name, g.name]})


# ---------------------------------------------------------------------------
# decay fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    gamma: float
    intercept: float
    window: tuple
    r2: float
    points: int
    sigma_model: float
    flags: tuple = ()

    def summary(self):
        return {"gamma": self.gamma, "intercept": self.intercept, "window": list(self.window), "r2": self.r2,
                "points": self.points, "sigma_model": self.sigma_model, "flags": list(self.flags)}


def _wls(t, y, w):
    W = w / w.sum()
    tm, ym = np.sum(W * t), np.sum(W * y)
    stt = np.sum(W * (t - tm) ** 2)
    slope = np.sum(W * (t - tm) * (y - ym)) / stt if stt > 0 else 0.0
    return slope, ym - slope * tm


def fit_decay_rate(t, C=None, se=None, t0=None, min_points=5, threshold=3.0):
    """Fit ``|C(t)| ~ exp(intercept - gamma t)`` over the noise-free window.

    The window starts at ``t0`` (default: first time) and ends at the last
    point with ``|C| > 3 se``; only points above that threshold are used.
    Weights are ``1 / ((se/|C|)^2 + sigma_model^2)`` where ``sigma_model``
    absorbs the scatter not explained by sampling error (feasible weighted
    least squares).  Accepts a :class:`CorrelationCurve` as first argument.

    Raises
    ------
    FitError
        If fewer than ``min_points`` points rise above ``3 se``.
    """
    if isinstance(t, CorrelationCurve):
        t, C, se = t.t, t.C, t.se
    t = np.asarray(t, float)
    mag = np.abs(np.asarray(C))
    se = np.zeros_like(mag) if se is None else np.asarray(se, float)
    start = t[0] if t0 is None else float(t0)
    above = (mag > threshold * se) & (mag > 0) & (t >= start)
    if above.sum() < min_points:
        raise FitError(f"noise floor reached: only {int(above.sum())} points above {threshold} standard errors")
    last = np.nonzero(above)[0][-1]
    sel = above & (np.arange(t.size) <= last)
    tt, yy = t[sel], np.log(mag[sel])
    rel2 = (se[sel] / mag[sel]) ** 2
    slope, icpt = _wls(tt, yy, np.ones_like(tt))
    resid = yy - (icpt + slope * tt)
    dof = max(tt.size - 2, 1)
    sig2 = max(0.0, float(np.sum(resid ** 2) / dof - rel2.mean()))
    var = rel2 + sig2
    if np.all(var > 0):
        slope, icpt = _wls(tt, yy, 1.0 / var)
        w = 1.0 / var
    else:
        w = np.ones_like(tt)
    resid = yy - (icpt + slope * tt)
    ybar = np.sum(w * yy) / w.sum()
    sst = np.sum(w * (yy - ybar) ** 2)
    r2 = 1.0 - np.sum(w * resid ** 2) / sst if sst > 0 else 1.0
    flags = []
    gamma = -slope
    if gamma <= 1e-12:
        gamma = 0.0
        flags.append("no decay")
    return DecayFit(float(gamma), float(icpt), (float(tt[0]), float(tt[-1])), float(r2), int(tt.size),
                    math.sqrt(sig2), tuple(flags))


class DecayRateFit(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit(t, C, se)`` then ``predict(t) = exp(intercept - gamma t)``."""

    def __init__(self, t0=None, min_points=5, threshold=3.0):
        self.t0 = t0
        self.min_points = min_points
        self.threshold = threshold

    def fit(self, t, C, se=None):
        res = fit_decay_rate(t, C, se, self.t0, self.min_points, self.threshold)
        self.result_ = res
        self.gamma_ = res.gamma
        self.intercept_ = res.intercept
        return self

    def predict(self, t):
        return np.exp(self.intercept_ - self.gamma_ * np.asarray(t, float))

    def score(self, t, C, sample_weight=None):
        return self.result_.r2
