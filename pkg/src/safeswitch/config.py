"""Experiment configuration: YAML loading, validation, default resolution.

The schema is nested ``section: {key: value}``; unknown sections or keys
are rejected.  ``load_config`` returns a fully resolved
:class:`ExperimentConfig` and writes it back to the output directory so a
run can be reproduced from its own echo.
"""

import copy
import math
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .errors import ConfigParseError, ValidationError

SYSTEM_SOURCES = ("builtin", "file", "random")
K0_SPECS = ("zero", "dare", "file")
K1_SPECS = ("dare", "dare_plus_rank_one", "file")
DEFAULT_DWELL_UNSTABLE = 10
DESK_TRAJ, PAPER_TRAJ = 10_000, 100_000

DEFAULTS = {
    "system": {
        "source": "builtin",
        "path": None,
        "seed": 0,
        "n": 4,
        "m": 2,
        "spectral_radius": 0.9,
    },
    "controller": {
        "K0": "zero",
        "K0_path": None,
        "K1": "dare",
        "K1_path": None,
        "alpha": None,
        "M": 1.0,
        "M_grid": None,
        "t": "auto",
        "rho_margin": 0.01,
    },
    "noise": {
        "kind": "gaussian",
        "dof": 5.0,
    },
    "simulation": {
        "T": 1000,
        "n_traj": DESK_TRAJ,
        "seed": 0,
        "workers": 1,
        "chunk_size": 250,
        "baseline_T": 200,
        "fourth_start_fraction": 0.5,
    },
    "verify": {
        "rho0_override": None,
        "tail_samples": 200_000,
    },
    "output": {
        "dir": "out",
        "timestamp": True,
    },
}


@dataclass
class ExperimentConfig:
    """Resolved configuration; ``data`` mirrors the YAML layout."""

    data: dict

    def __getitem__(self, section):
        return self.data[section]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and _canon(self.data) == _canon(other.data)

    @property
    def out_dir(self):
        return self.data["output"]["dir"]

    @property
    def M_values(self):
        grid = self.data["controller"]["M_grid"]
        return list(grid) if grid is not None else [self.data["controller"]["M"]]

    def to_yaml(self):
        return yaml.safe_dump(_dump(self.data), sort_keys=False)


def _canon(d):
    if isinstance(d, dict):
        return {k: _canon(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_canon(v) for v in d]
    return d


def _dump(d):
    if isinstance(d, dict):
        return {k: _dump(v) for k, v in d.items()}
    if isinstance(d, list):
        return [_dump(v) for v in d]
    if isinstance(d, float) and math.isinf(d):
        return "inf"
    if isinstance(d, (np.floating, np.integer)):
        return d.item()
    return d


def parse_grid(spec):
    """``"start:step:stop"`` (inclusive) or a list of numbers."""
    if isinstance(spec, str):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid {spec!r} is not start:step:stop")
        start, step, stop = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("grid step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    return [float(v) for v in spec]


def _as_threshold(v):
    if isinstance(v, str) and v.strip().lower() in ("inf", "infinity", "unbounded"):
        return math.inf
    return float(v)


def parse_yaml(text):
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ConfigParseError(str(exc.problem or exc), line=line) from None
    except yaml.YAMLError as exc:
        raise ConfigParseError(str(exc)) from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigParseError("top level must be a mapping")
    return raw


def _merge(raw, problems):
    data = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            problems.append((section, "unknown section"))
            continue
        if body is None:
            continue
        if not isinstance(body, dict):
            problems.append((section, "must be a mapping"))
            continue
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                problems.append((f"{section}.{key}", "unknown key"))
            else:
                data[section][key] = value
    return data


def _check(problems, cond, field, msg):
    if not cond:
        problems.append((field, msg))


def _validate(data, problems):
    sysc, ctl, noise, sim = (data[k] for k in ("system", "controller", "noise", "simulation"))
    _check(problems, sysc["source"] in SYSTEM_SOURCES, "system.source",
           f"must be one of {SYSTEM_SOURCES}")
    if sysc["source"] == "file":
        _check(problems, bool(sysc["path"]), "system.path", "required when source is 'file'")
    elif sysc["path"] is not None:
        problems.append(("system.path", "only allowed when source is 'file'"))
    _check(problems, ctl["K0"] in K0_SPECS, "controller.K0", f"must be one of {K0_SPECS}")
    _check(problems, ctl["K1"] in K1_SPECS, "controller.K1", f"must be one of {K1_SPECS}")
    for g in ("K0", "K1"):
        if ctl[g] == "file":
            _check(problems, bool(ctl[f"{g}_path"]), f"controller.{g}_path",
                   f"required when {g} is 'file'")
    try:
        ctl["M"] = _as_threshold(ctl["M"])
        _check(problems, ctl["M"] >= 0, "controller.M", "must be >= 0")
    except (TypeError, ValueError):
        problems.append(("controller.M", "must be a number or 'inf'"))
    if ctl["M_grid"] is not None:
        try:
            grid = parse_grid(ctl["M_grid"])
            ctl["M_grid"] = grid
            _check(problems, len(grid) > 0 and grid[0] > 0, "controller.M_grid",
                   "values must be positive")
            _check(problems, all(b > a for a, b in zip(grid, grid[1:])), "controller.M_grid",
                   "must be strictly increasing")
        except (TypeError, ValueError) as exc:
            problems.append(("controller.M_grid", str(exc)))
    t = ctl["t"]
    if t != "auto":
        _check(problems, isinstance(t, int) and not isinstance(t, bool) and t >= 1,
               "controller.t", "must be 'auto' or a positive integer")
    _check(problems, noise["kind"] in ("gaussian", "student_t", "laplace_product",
                                       "bounded_mixture"), "noise.kind", "unknown noise kind")
    if noise["kind"] == "student_t":
        _check(problems, _num(noise["dof"]) and noise["dof"] >= 5, "noise.dof",
               "must be >= 5 for a finite fourth moment")
    for key in ("T", "n_traj", "workers", "chunk_size", "baseline_T"):
        v = sim[key]
        _check(problems, isinstance(v, int) and not isinstance(v, bool) and v >= 1,
               f"simulation.{key}", "must be a positive integer")
    _check(problems, isinstance(sim["seed"], int) and sim["seed"] >= 0, "simulation.seed",
           "must be a non-negative integer")
    if sysc["source"] == "random":
        for key in ("n", "m"):
            v = sysc[key]
            _check(problems, isinstance(v, int) and v >= 1, f"system.{key}",
                   "must be a positive integer")
        _check(problems, _num(sysc["spectral_radius"]) and 0 < sysc["spectral_radius"] < 1,
               "system.spectral_radius", "must lie in (0, 1)")


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def load_config(path, overrides=None, echo=True):
    """Parse, validate and resolve a configuration file.

    ``overrides`` maps ``"section.key"`` to values applied before
    validation (used by the command-line flags).  Matrix dimensions and the
    automatic dwell time are resolved against the actual system, so
    dimension errors surface here.
    """
    with open(path) as fh:
        raw = parse_yaml(fh.read())
    return resolve(raw, overrides=overrides, echo=echo, base_dir=os.path.dirname(path))


def resolve(raw, overrides=None, echo=False, base_dir="."):
    problems = []
    data = _merge(raw, problems)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        data[section][key] = value
    _validate(data, problems)
    if problems:
        raise ValidationError(problems)
    for section in ("system", "controller"):
        for key in ("path", "K0_path", "K1_path"):
            p = data[section].get(key)
            if p and not os.path.isabs(p):
                data[section][key] = os.path.normpath(os.path.join(base_dir, p))

    from .experiments import resolve_dwell_and_alpha
    resolve_dwell_and_alpha(data)
    cfg = ExperimentConfig(data)
    if echo:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "config.resolved.yaml"), "w") as fh:
            fh.write(cfg.to_yaml())
    return cfg
