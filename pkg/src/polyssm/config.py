"""Experiment configuration: INI files with a fixed schema.

Example::

    [experiment]
    system = lorenz63
    method = graphgrad
    T = 100
    replicates = 10
    seed = 0

    [system]
    sigma2 = 1.0

    [fit]
    d = 2
    lam = tune

Every key is validated before any compute.  Unknown sections or keys raise
:class:`ConfigError` naming the offending field as ``section.key``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

SYSTEMS = ("lorenz63", "lorenz96", "kuramoto", "random")
METHODS = ("graphgrad", "graphgrad-subgrad", "pmle", "truemle")


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _int_list(text):
    return [int(tok) for tok in str(text).replace(",", " ").split()]


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if str(text).strip().lower() in ("none", "") else float(text)


def _lam(text):
    return "tune" if str(text).strip().lower() == "tune" else float(text)


def _batches(text):
    return None if str(text).strip().lower() in ("auto", "none") else int(text)


# section -> key -> (parser, default, check or None, message)
SCHEMA = {
    "experiment": {
        "system": (str, "lorenz63", lambda v: v in SYSTEMS, f"one of {SYSTEMS}"),
        "method": (str, "graphgrad", lambda v: v in METHODS, f"one of {METHODS}"),
        "T": (int, 100, _positive, "a positive integer"),
        "replicates": (int, 10, _positive, "a positive integer"),
        "seed": (int, 0, _nonneg, "a nonnegative integer"),
        "out": (str, "runs", None, ""),
        "max_redraws": (int, 100, _positive, "a positive integer"),
    },
    "system": {
        "dt": (float, None, _positive, "positive"),
        "sigma2": (float, 1.0, _positive, "positive"),
        "sigma": (float, 10.0, None, ""),
        "rho": (float, 28.0, None, ""),
        "beta": (float, 8.0 / 3.0, None, ""),
        "obs_noise_scale": (_bool, None, None, ""),
        "n_x": (int, None, lambda v: v >= 2, "an integer >= 2"),
        "forcing": (float, 8.0, None, ""),
        "coupling": (float, 0.8, None, ""),
        "eta_mean": (float, 0.5, None, ""),
        "eta_sd": (float, 0.5, _nonneg, "nonnegative"),
        "noise_sd": (float, 0.1, _positive, "positive"),
        "init_var": (float, 0.2, _positive, "positive"),
        "burn_in_time": (float, 10.0, _nonneg, "nonnegative"),
        "sparsity": (float, 0.75, lambda v: 0 <= v < 1, "in [0, 1)"),
        "degree": (int, 2, _positive, "a positive integer"),
    },
    "fit": {
        "d": (int, 2, _positive, "a positive integer"),
        "K": (int, 100, lambda v: v >= 2, "an integer >= 2"),
        "B": (_batches, None, lambda v: v is None or v >= 1, "'auto' or a positive integer"),
        "S": (int, 100, _positive, "a positive integer"),
        "lr": (float, 1e-3, _positive, "positive"),
        "lam": (_lam, "tune", lambda v: v == "tune" or v >= 0, "'tune' or a nonnegative number"),
        "beta1": (float, 0.95, lambda v: 0 <= v < 1, "in [0, 1)"),
        "beta2": (float, 0.25, lambda v: 0 <= v < 1, "in [0, 1)"),
        "clip_ratio": (_optional_float, 10.0, lambda v: v is None or v > 1, "'none' or > 1"),
    },
    "tune": {
        "T": (int, 50, _positive, "a positive integer"),
        "iterations": (int, 10, _positive, "a positive integer"),
        "lo": (float, -5.0, None, ""),
        "hi": (float, 2.0, None, ""),
        "seed": (int, 12345, _nonneg, "a nonnegative integer"),
    },
    "degeneracy": {
        "K_list": (_int_list, [5, 10, 100, 1000], lambda v: bool(v) and min(v) >= 2, "integers >= 2"),
        "n_systems": (int, 200, _positive, "a positive integer"),
        "T": (int, 300, _positive, "a positive integer"),
    },
}

SYSTEM_DEFAULT_DT = {"lorenz63": 0.025, "lorenz96": 0.025, "kuramoto": 0.05, "random": 0.025}
SYSTEM_DEFAULT_NX = {"lorenz63": 3, "lorenz96": 20, "kuramoto": 20, "random": 3}


@dataclass
class ExperimentConfig:
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def experiment(self):
        return self.sections["experiment"]

    @property
    def system(self):
        return self.sections["system"]

    @property
    def fit(self):
        return self.sections["fit"]

    @property
    def tune(self):
        return self.sections["tune"]

    @property
    def degeneracy(self):
        return self.sections["degeneracy"]

    def to_dict(self):
        return {sec: dict(vals) for sec, vals in self.sections.items()}

    def config_hash(self) -> str:
        """Digest of every setting that affects numbers (the output directory does not)."""
        data = self.to_dict()
        data["experiment"].pop("out", None)
        blob = json.dumps(data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides, revalidated."""
        data = self.to_dict()
        for name, value in changes.items():
            sec, _, key = name.partition("__")
            data.setdefault(sec, {})[key] = value
        return from_dict(data)


def _validate(section, key, raw, parse, check, message):
    name = f"{section}.{key}"
    try:
        if parse is int and isinstance(raw, float) and not raw.is_integer():
            raise ValueError
        value = parse(raw) if isinstance(raw, str) or parse in (int, float) else raw
        if parse is int:
            value = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r}", field=name) from None
    if value is not None and check is not None and not check(value):
        raise ConfigError(f"{name} must be {message}, got {raw!r}", field=name)
    return value


def from_dict(data: dict) -> ExperimentConfig:
    """Validate a ``{section: {key: value}}`` mapping (values may be strings)."""
    sections = {}
    for sec in data:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", field=sec)
    for sec, keys in SCHEMA.items():
        given = dict(data.get(sec, {}))
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {sec}.{key}", field=f"{sec}.{key}")
        out = {}
        for key, (parse, default, check, message) in keys.items():
            raw = given.get(key, default)
            out[key] = default if raw is None else _validate(sec, key, raw, parse, check, message)
        sections[sec] = out
    system = sections["experiment"]["system"]
    sy = sections["system"]
    if sy["dt"] is None:
        sy["dt"] = SYSTEM_DEFAULT_DT[system]
    if sy["n_x"] is None:
        sy["n_x"] = SYSTEM_DEFAULT_NX[system]
    if sy["obs_noise_scale"] is None:
        sy["obs_noise_scale"] = system in ("lorenz96", "kuramoto")
    if system == "lorenz63" and sy["n_x"] != 3:
        raise ConfigError("system.n_x must be 3 for lorenz63", field="system.n_x")
    if system == "lorenz96" and sy["n_x"] < 4:
        raise ConfigError("system.n_x must be >= 4 for lorenz96", field="system.n_x")
    method = sections["experiment"]["method"]
    if method == "truemle" and system != "kuramoto":
        raise ConfigError("method truemle needs system kuramoto", field="experiment.method")
    B = sections["fit"]["B"]
    if B is not None and B > sections["experiment"]["T"]:
        raise ConfigError("fit.B cannot exceed experiment.T", field="fit.B")
    if sections["tune"]["lo"] >= sections["tune"]["hi"]:
        raise ConfigError("tune.lo must be below tune.hi", field="tune.lo")
    return ExperimentConfig(sections)


def parse_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T vs t)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict({sec: dict(parser[sec]) for sec in parser.sections()})


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", field="path") from None
    return parse_text(text)


def default() -> ExperimentConfig:
    return from_dict({})


def describe_schema() -> str:
    """Human-readable schema listing, used by the README and ``--help``."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (_, default, _, message) in keys.items():
            note = f"  ({message})" if message else ""
            lines.append(f"  {key} = {default!r}{note}")
    return "\n".join(lines)
