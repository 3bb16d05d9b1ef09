"""Command-line entry point: ``semiflow <command> <config.toml> [--out DIR] [--seed N] [--jobs N]``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
from importlib import metadata

import numpy as np

from . import holder, lab, phase_space, transfer, transversality
from .config import AUTO, ExperimentConfig
from .errors import ConfigError, FitError, PreconditionError, SemiflowError

COMMANDS = ("verify", "density", "ly", "scan", "transversality", "cohomology", "oscint", "decay", "all")
STAGE_SALT = {name: i for i, name in enumerate(COMMANDS)}
# density-weighted mass sums equal 1 only up to the interpolation error of the density grid
SUBMULT_TOL = 1e-6


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats replaced by strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, complex):
        return {"re": _clean(obj.real), "im": _clean(obj.imag)}
    return obj


class Artifacts:
    """Writes CSV/JSON files that embed the configuration hash."""

    def __init__(self, out_dir, config_hash):
        self.out = out_dir
        self.hash = config_hash
        self.written = []
        os.makedirs(out_dir, exist_ok=True)

    def csv(self, name, header, rows):
        path = os.path.join(self.out, name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# config_hash: {self.hash}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.written.append(name)

    def json(self, name, obj):
        path = os.path.join(self.out, name)
        payload = {"config_hash": self.hash, **_clean(obj)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(name)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

class Pipeline:
    """Runs stages against one configuration, caching shared intermediate results."""

    def __init__(self, cfg: ExperimentConfig, artifacts: Artifacts, jobs=1):
        self.cfg = cfg
        self.art = artifacts
        self.jobs = jobs
        try:
            self.tmap = phase_space.make_map(cfg["map.name"], cfg["map.params"])
        except (PreconditionError, TypeError) as exc:
            raise ConfigError(str(exc), "map") from None
        try:
            self.roof = phase_space.make_roof(cfg["roof.name"], cfg["roof.params"], self.tmap, cfg["roof.alpha"])
        except (PreconditionError, TypeError) as exc:
            raise ConfigError(str(exc), "roof") from None
        self.results = {}
        self._density = None
        self._report = None

    def seed(self, stage):
        return int(np.random.SeedSequence([self.cfg["run.seed"], STAGE_SALT[stage]]).generate_state(1)[0])

    @property
    def report(self):
        if self._report is None:
            grid = self.cfg["grid.verify"] or None
            self._report = phase_space.verify_assumptions(self.tmap, self.roof, grid)
        return self._report

    @property
    def constants(self):
        return self.report.constants

    @property
    def density(self):
        if self._density is None:
            self._density = transfer.invariant_density(self.tmap, resolution=self.cfg["grid.density"])
        return self._density

    def _auto(self, key):
        v = self.cfg[key]
        return None if v == AUTO else v

    # individual commands --------------------------------------------------
    def verify(self):
        rep = self.report
        out = {"map": self.tmap.name, "map_params": list(self.tmap.params), "roof": self.roof.name,
               "roof_params": list(self.roof.params), **rep.to_dict()}
        self.art.json("assumptions.json", out)
        self.results["verify"] = out

    def density_stage(self):
        h = self.density
        text = h.to_csv()
        self.art.csv("density.csv", ["element", *(["i"] if h.d == 1 else ["i", "j"]), "re", "im"],
                     (r.split(",") for r in text.strip().split("\n")[1:]))
        out = {"min": np.real(h.values).min(), "max": np.real(h.values).max(), "integral": np.real(h.integral()),
               "resolution": h.resolution}
        self.art.json("density.json", out)
        self.results["density"] = out

    def ly(self):
        c = self.cfg
        zs = [complex(a, b) for a, b in zip(c["ly.z_re"], c["ly.z_im"])]
        reps = transfer.ly_suite(self.tmap, self.roof, zs, c["ly.n_list"], c["ly.n_probes"], c["ly.band"],
                                 c["grid.ly"], self.seed("ly"), c["schedule.sigma"], self.constants, self.jobs)
        rows = [(r.z.real, r.z.imag, r.n, r.A, r.B, r.C_proof, r.adapted_ratio, r.sup_L_a, r.violations)
                for r in reps]
        self.art.csv("ly.csv", ["z_re", "z_im", "n", "A", "B", "C_proof", "adapted_ratio", "sup_L_a_1",
                                "violations"], rows)
        out = {"cells": len(reps), "violations": sum(r.violations for r in reps),
               "max_ratio_to_proof": max(r.A / r.C_proof for r in reps)}
        out["passed"] = out["violations"] == 0
        self.art.json("ly.json", out)
        self.results["ly"] = out

    def scan(self):
        c = self.cfg
        res = transfer.norm_decay_scan(
            self.tmap, self.roof, c["scan.a"], c["scan.b_list"], c["scan.n_list"], n_probes=c["scan.n_probes"],
            band=c["scan.band"], resolution=c["grid.scan"], seed=self.seed("scan"), B=self._auto("schedule.B"),
            b0=c["schedule.b0"], sigma=c["schedule.sigma"], zeta_tol=c["scan.zeta_tol"], n_jobs=self.jobs,
            constants=self.constants, beta1=self._auto("schedule.beta1"), beta2=self._auto("schedule.beta2"),
            q=self._auto("schedule.q"))
        self.art.csv("scan.csv", ["b", "n", "ratio", "zeta"], res.rows())
        out = res.summary()
        self.art.json("scan.json", out)
        self.results["scan"] = out

    def transversality_stage(self):
        c = self.cfg
        ns = c["transversality.n_list"]
        ys = transversality._default_ys(self.tmap, c["transversality.y_per_element"])
        const = self.constants
        rows, phis = [], []
        for n in ns:
            vals = [transversality.phi_sum(self.tmap, self.roof, n, y, None, None, const) for y in ys]
            rows.extend((n, i, v) for i, v in enumerate(vals))
            phis.append(max(vals))
        self.art.csv("phi.csv", ["n", "y_id", "value"], rows)
        nmax = max(ns) if ns else 0
        vs = {n: transversality.varphi_sup(self.tmap, self.roof, n, ys, self.density, const)
              for n in range(1, nmax + 1)}
        self.art.csv("varphi.csv", ["n", "y_id", "value"], ((n, "sup", v) for n, v in vs.items()))
        sub = [(n, m, vs[n + m], vs[n] * vs[m]) for n in vs for m in vs if n <= m and n + m <= nmax]
        slope = transversality.decay_slope(ns, phis) if len(ns) > 1 else float("nan")
        out = {"n": ns, "phi": phis, "phi_slope": slope,
               "phi_strictly_decreasing": bool(np.all(np.diff(phis) < 0)),
               "varphi_sup": {str(n): v for n, v in vs.items()},
               "submultiplicative": all(a <= b + SUBMULT_TOL for _, _, a, b in sub),
               "submultiplicative_pairs": len(sub)}
        self.art.json("transversality.json", out)
        self.results["transversality"] = out

    def cohomology(self):
        c = self.cfg
        v = transversality.cohomology_detect(self.tmap, self.roof, c["cohomology.tol"], c["cohomology.n_samples"],
                                             c["cohomology.residual_grid"], tuple(c["transversality.n_list"]),
                                             self.constants)
        out = v.summary()
        self.art.json("cohomology.json", out)
        self.results["cohomology"] = out

    def oscint(self):
        c = self.cfg
        cases = holder.random_oscint_cases(c["oscint.count"], self.seed("oscint"),
                                           (c["oscint.b_min"], c["oscint.b_max"]),
                                           (c["oscint.kappa_min"], c["oscint.kappa_max"]))
        rows, bad = [], 0
        for i, cs in enumerate(cases):
            r = holder.oscillatory_integral(cs["k"], cs["theta"], cs["dtheta"], cs["b"], alpha=c["roof.alpha"])
            bad += int(not r.bound_satisfied)
            rows.append((i, cs["b"], r.kappa, r.value.real, r.value.imag, abs(r.value), r.bound,
                         r.bound_satisfied))
        self.art.csv("oscint.csv", ["case", "b", "kappa", "re", "im", "abs", "bound", "ok"], rows)
        out = {"count": len(cases), "violations": bad, "passed": bad == 0}
        self.art.json("oscint.json", out)
        self.results["oscint"] = out

    def decay(self):
        c = self.cfg
        f = lab.make_observable(c["mc.observable"], c["mc.observable_params"])
        g = f if c["mc.partner"] == "same" else lab.Observable(
            lambda x, u, tau, f=f: np.conj(f(x, u, tau)), f"conj({f.name})")
        t = np.round(np.arange(0.0, c["mc.t_max"] + 0.5 * c["mc.t_step"], c["mc.t_step"]), 12)
        curve = lab.mc_correlation(self.tmap, self.roof, f, g, t, c["mc.N"], self.seed("decay"), self.density,
                                   c["mc.n_blocks"], self.jobs)
        self.art.csv("correlation.csv", ["t", "re_C", "im_C", "stderr"],
                     ((ti, complex(ci).real, complex(ci).imag, si) for ti, ci, si in zip(curve.t, curve.C, curve.se)))
        try:
            fit = lab.fit_decay_rate(curve, t0=c["mc.t0"]).summary()
        except FitError as exc:
            fit = {"gamma": float("nan"), "error": str(exc), "flags": ["noise floor reached"]}
        out = {"N": curve.N, "fit": fit, "variance_f": curve.variance_f}
        self.art.json("decay.json", out)
        self.results["decay"] = out

    def all(self):
        for stage in (self.verify, self.density_stage, self.ly, self.scan, self.transversality_stage,
                      self.cohomology, self.oscint, self.decay):
            stage()
        r = self.results
        zeta = r["scan"]["min_zeta"]
        gamma = r["decay"]["fit"].get("gamma", float("nan"))
        zeta_ok = isinstance(zeta, float) and zeta > 0
        gamma_ok = isinstance(gamma, float) and gamma > 0
        checks = {
            "zeta_positive": zeta_ok,
            "phi_slope_negative": r["transversality"]["phi_slope"] < 0,
            "verdict_not_cohomologous": r["cohomology"]["verdict"] == "not_cohomologous",
            "gamma_positive": gamma_ok,
            "gamma_zeta_within_factor_2": bool(zeta_ok and gamma_ok and 0.5 <= gamma / zeta <= 2.0),
            "ly_passed": r["ly"]["passed"],
            "oscint_passed": r["oscint"]["passed"],
        }
        out = {"checks": checks, "all_passed": all(checks.values()), "min_zeta": zeta, "gamma": gamma,
               "phi_slope": r["transversality"]["phi_slope"], "verdict": r["cohomology"]["verdict"]}
        self.art.json("all.json", out)
        self.results["all"] = out

    def run(self, command):
        dispatch = {"verify": self.verify, "density": self.density_stage, "ly": self.ly, "scan": self.scan,
                    "transversality": self.transversality_stage, "cohomology": self.cohomology,
                    "oscint": self.oscint, "decay": self.decay, "all": self.all}
        dispatch[command]()


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "scikit-learn", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def run_command(command, config, out=None, seed=None, jobs=None):
    """Run one command; returns ``(exit_status, pipeline_or_None, error_message_or_None)``.

    The run manifest (config echo, versions, seed, wall time, stage status)
    is written even when a stage fails, so earlier artifacts stay usable.
    """
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}", "command")
    cfg = config.override(seed=seed, out=out, jobs=jobs)
    art = Artifacts(cfg["run.out"], cfg.hash)
    start = time.perf_counter()
    status, error, pipe = 0, None, None
    try:
        pipe = Pipeline(cfg, art, cfg["run.jobs"])
        pipe.run(command)
    except SemiflowError as exc:
        status, error = exc.exit_code, f"{type(exc).__name__}: {exc}"
    manifest = {"command": command, "config_hash": cfg.hash, "config_text": cfg.text,
                "config": cfg.values, "seed": cfg["run.seed"], "jobs": cfg["run.jobs"],
                "versions": _versions(), "wall_time_s": time.perf_counter() - start,
                "artifacts": list(art.written), "exit_status": status, "error": error,
                "checks": None if pipe is None else pipe.results.get("all", {}).get("checks")}
    with open(os.path.join(cfg["run.out"], "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(_clean(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status, pipe, error


def build_parser():
    p = argparse.ArgumentParser(prog="semiflow", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="TOML configuration file (flat dotted keys)")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--jobs", type=int, help="worker threads (overrides run.jobs; never changes results)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("must be >= 0", "--seed")
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        status, _, error = run_command(args.command, cfg, args.out, args.seed, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    if status:
        print(f"{args.command} failed ({error}); exit status {status}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
