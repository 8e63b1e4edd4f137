"""Experiment configuration: an INI file with one section per module.

Example::

    [experiment]
    name = layer
    s = 0.5
    n = 1
    seed = 0

    [layer]
    X = 40
    N = 801
    tol = 1e-4

Unknown sections or keys are rejected so that typos do not pass silently.
Errors carry the offending section, key and (when known) line number.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

EXPERIMENTS = ("renormalization", "layer", "stability", "sliding", "constrained_min", "glue",
               "blowdown", "fit1d", "full_pipeline")


class ConfigError(ValueError):
    def __init__(self, message: str, section: str = "", key: str = "", line: int | None = None):
        where = ".".join(p for p in (section, key) if p)
        loc = f"line {line}: " if line else ""
        super().__init__(f"{loc}{where}: {message}" if where else f"{loc}{message}")
        self.section, self.key, self.line = section, key, line


@dataclass
class LayerParams:
    X: float = 40.0
    N: int = 801
    tol: float = 1e-4


@dataclass
class Grid2DParams:
    L1: float = 12.0
    L2: float = 16.0
    h: float = 0.25
    frame: int = 8
    tol: float = 1e-10
    scenario: str = "tensor"
    angle: float = 10.0


@dataclass
class EnergyParams:
    R: float = 8.0
    R_list: tuple = (4.0, 8.0, 16.0, 32.0)
    zmesh: int = 48
    bump_radius: float = 1.0
    bump_center: float = 0.5
    tol: float = 0.05


@dataclass
class AnalysisParams:
    trials: int = 50
    count: int = 50
    slack: float = 1e-8
    null_tol: float = 1e-2
    k_max: float = 4.0
    k_steps: int = 41
    eps_list: tuple = (1.0, 0.5, 0.25, 0.125)
    rescale_eps: tuple = (1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01)
    glue_trials: int = 20
    zmesh: int = 32


# section -> key -> type
_SCHEMA = {
    "experiment": {"name": str, "s": float, "n": int, "seed": int, "output_dir": str, "nonlinearity": str},
    "layer": {"X": float, "N": int, "tol": float},
    "grid2d": {"L1": float, "L2": float, "h": float, "frame": int, "tol": float, "scenario": str, "angle": float},
    "energy": {"R": float, "R_list": tuple, "zmesh": int, "bump_radius": float, "bump_center": float, "tol": float},
    "analysis": {"trials": int, "count": int, "slack": float, "null_tol": float, "k_max": float, "k_steps": int,
                 "eps_list": tuple, "rescale_eps": tuple, "glue_trials": int, "zmesh": int},
}
_TOLERANCES = {("layer", "tol"), ("grid2d", "tol"), ("energy", "tol"), ("analysis", "slack"),
               ("analysis", "null_tol")}


@dataclass
class ExperimentConfig:
    experiment: str
    s: float
    n: int = 1
    seed: int = 0
    output_dir: str = "runs"
    nonlinearity: str = "cubic"
    layer: LayerParams = field(default_factory=LayerParams)
    grid2d: Grid2DParams = field(default_factory=Grid2DParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    analysis: AnalysisParams = field(default_factory=AnalysisParams)

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}",
                              "experiment", "name")
        if not 0 < self.s < 1:
            raise ConfigError(f"s must lie in (0, 1), got {self.s}", "experiment", "s")
        if self.n not in (1, 2, 3):
            raise ConfigError(f"n must be 1, 2 or 3, got {self.n}", "experiment", "n")
        for sec, key in _TOLERANCES:
            if getattr(getattr(self, sec), key) <= 0:
                raise ConfigError("tolerances must be positive", sec, key)
        if self.layer.N < 3 or self.layer.N % 2 == 0:
            raise ConfigError("N must be odd and at least 3", "layer", "N")
        if self.grid2d.scenario not in ("tensor", "rotated", "two_profile"):
            raise ConfigError("scenario must be tensor, rotated or two_profile", "grid2d", "scenario")
        if not self.energy.R_list or min(self.energy.R_list) <= 0:
            raise ConfigError("R_list needs positive radii", "energy", "R_list")
        return self

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Content hash of the configuration (output location excluded); names the run directory."""
        d = self.as_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for i, raw in enumerate(text.splitlines(), 1):
        ln = raw.strip()
        if ln.startswith("[") and ln.endswith("]"):
            cur = ln[1:-1].strip()
        elif cur == section and "=" in ln and ln.split("=", 1)[0].strip().lower() == key.lower():
            return i
    return None


def _convert(raw: str, typ):
    if typ is tuple:
        return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw.strip()


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], line=getattr(exc, "lineno", None)) from None
    values: dict = {}
    for sec in cp.sections():
        if sec not in _SCHEMA:
            line = next((i for i, ln in enumerate(text.splitlines(), 1) if ln.strip() == f"[{sec}]"), None)
            raise ConfigError(f"unknown section [{sec}]", sec, line=line)
        known = {k.lower(): k for k in _SCHEMA[sec]}
        for key, raw in cp.items(sec):
            line = _line_of(text, sec, key)
            if key.lower() not in known:
                raise ConfigError("unknown key", sec, key, line)
            name = known[key.lower()]
            try:
                values[(sec, name)] = _convert(raw, _SCHEMA[sec][name])
            except ValueError:
                raise ConfigError(f"cannot read {raw!r} as {_SCHEMA[sec][name].__name__}", sec, name, line) from None
    for req in ("name", "s"):
        if ("experiment", req) not in values:
            raise ConfigError("missing required key", "experiment", req)
    top = {k: v for (sec, k), v in values.items() if sec == "experiment"}
    cfg = ExperimentConfig(experiment=top.pop("name"), **top)
    for sec in ("layer", "grid2d", "energy", "analysis"):
        sub = getattr(cfg, sec)
        for (sname, k), v in values.items():
            if sname == sec:
                setattr(sub, k, v)
    try:
        return cfg.validate()
    except ConfigError as exc:
        if exc.line is None and exc.key:
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.section, exc.key,
                              _line_of(text, exc.section, exc.key)) from None
        raise


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
