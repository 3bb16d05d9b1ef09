"""Experiment configuration: flat dotted keys in a TOML file, every key defaulted."""

from __future__ import annotations

import copy
import hashlib
import json
import math

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

AUTO = "auto"

DEFAULTS = {
    "map.name": "perturbed_doubling",
    "map.params": [0.05],
    "roof.name": "trig",
    "roof.params": [1.0, 0.2, 1],
    "roof.alpha": 1.0,
    "grid.verify": 0,
    "grid.density": 4096,
    "grid.scan": 512,
    "grid.ly": 512,
    "schedule.sigma": 0.01,
    "schedule.b0": 10.0,
    "schedule.B": AUTO,
    "schedule.beta1": AUTO,
    "schedule.beta2": AUTO,
    "schedule.q": AUTO,
    "scan.a": 0.0,
    "scan.b_list": [10.0, 20.0, 40.0, 80.0],
    "scan.n_list": list(range(0, 15)),
    "scan.n_probes": 32,
    "scan.band": 6,
    "scan.zeta_tol": 1e-6,
    "ly.z_re": [0.0, 0.005, 0.005],
    "ly.z_im": [0.0, 50.0, -50.0],
    "ly.n_list": list(range(1, 11)),
    "ly.n_probes": 20,
    "ly.band": 4,
    "transversality.n_list": list(range(4, 11)),
    "transversality.y_per_element": 1,
    "cohomology.tol": 1e-6,
    "cohomology.n_samples": 50,
    "cohomology.residual_grid": 256,
    "oscint.count": 100,
    "oscint.b_min": 2.0,
    "oscint.b_max": 1000.0,
    "oscint.kappa_min": 0.05,
    "oscint.kappa_max": 1.0,
    "mc.N": 1_000_000,
    "mc.t_max": 15.0,
    "mc.t_step": 0.25,
    "mc.t0": 0.0,
    "mc.observable": "sin_bump",
    "mc.observable_params": [4],
    "mc.partner": "same",
    "mc.n_blocks": 100,
    "run.seed": 0,
    "run.jobs": 1,
    "run.out": "out",
}

# keys that do not influence artifact contents
VOLATILE = {"run.jobs", "run.out"}


def _flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, value, default):
    if default == AUTO:
        if value == AUTO:
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value):
            return float(value)
        raise ConfigError(f"expected a number or {AUTO!r}, got {value!r}", key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"expected a list of numbers, got {value!r}", key)
        return list(value)
    raise ConfigError(f"unsupported value {value!r}", key)


class ExperimentConfig:
    """Resolved configuration with the raw text kept for the run manifest.

    Parameters
    ----------
    values : dict
        Flat ``section.key -> value`` overrides.
    text : str
        The file contents, echoed verbatim into the manifest.
    """

    def __init__(self, values=None, text=""):
        self.text = text
        self.values = copy.deepcopy(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError("unknown configuration key", key)
            self.values[key] = _coerce(key, value, DEFAULTS[key])
        self._validate()

    @classmethod
    def from_text(cls, text):
        try:
            tree = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse configuration: {exc}") from None
        return cls(_flatten(tree), text)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration file: {exc}") from None
        return cls.from_text(text)

    def __getitem__(self, key):
        return self.values[key]

    def override(self, **kw):
        """Copy with ``run.*`` overrides, e.g. ``override(seed=3)``."""
        vals = {k: v for k, v in self.values.items()}
        for k, v in kw.items():
            if v is not None:
                vals[f"run.{k}"] = v
        return ExperimentConfig(vals, self.text)

    def _validate(self):
        v = self.values
        positive = ["grid.density", "grid.scan", "grid.ly", "scan.n_probes", "ly.n_probes", "mc.N",
                    "mc.n_blocks", "cohomology.n_samples", "cohomology.residual_grid", "oscint.count",
                    "run.jobs", "transversality.y_per_element"]
        for key in positive:
            if v[key] < 1:
                raise ConfigError("must be >= 1", key)
        for key in ("cohomology.tol", "mc.t_step", "mc.t_max", "schedule.sigma", "oscint.b_min",
                    "oscint.kappa_min"):
            if not v[key] > 0:
                raise ConfigError("must be > 0", key)
        if not 0 < v["roof.alpha"] <= 1:
            raise ConfigError("must lie in (0, 1]", "roof.alpha")
        if len(v["ly.z_re"]) != len(v["ly.z_im"]):
            raise ConfigError("ly.z_re and ly.z_im must have equal length", "ly.z_im")
        if v["scan.a"] <= -v["schedule.sigma"]:
            raise ConfigError("must exceed -schedule.sigma", "scan.a")
        if any(n < 0 for n in v["scan.n_list"]):
            raise ConfigError("iterates must be >= 0", "scan.n_list")
        if v["mc.partner"] not in ("same", "conjugate"):
            raise ConfigError("must be 'same' or 'conjugate'", "mc.partner")
        if v["oscint.b_max"] < v["oscint.b_min"]:
            raise ConfigError("must be >= oscint.b_min", "oscint.b_max")
        if v["run.seed"] < 0:
            raise ConfigError("must be >= 0", "run.seed")

    def stable_dict(self):
        """Values that determine artifact contents (excludes worker count and output path)."""
        return {k: v for k, v in sorted(self.values.items()) if k not in VOLATILE}

    @property
    def hash(self):
        blob = json.dumps(self.stable_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
