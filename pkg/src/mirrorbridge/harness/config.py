"""Experiment configuration: TOML sections, defaults and validation.

A config has the sections ``problem``, ``model``, ``schedule``, ``trainer``,
``eval`` and ``output``.  Omitted keys take the defaults below (the 2-d
reference column: K=8, eps=0.1, 400 outer steps of 50 inner steps).
Unknown sections or keys are errors, and validation reports every
violated field at once.
"""
import copy
import hashlib
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..solvers import FitConfig
from ..vomd import OmdSchedule, TrainerConfig
from .problems import PRESETS, ProblemSpec, to_mixture

DEFAULTS = {
    "problem": {
        "preset": "gauss_to_ring8",
        "name": "",
        "d": 2,
        "mu": {},
        "nu": {},
        "epsilon": 0.1,
        "seed": 0,
        "n_train": 8000,
        "window_width": 0.125,
        "rotation_period": 25,
    },
    "model": {
        "n_components": 8,
        "init": "data",
        "init_cov": 1.0,
    },
    "schedule": {
        "kind": "harmonic",
        "eta_1": 1.0,
        "eta_T": 0.05,
        "total_steps": 400,
        "warmup_fraction": 0.0,
    },
    "trainer": {
        "inner_steps": 50,
        "h": 0.0001,
        "batch_size": 1,
        "n_y": 16,
        "zero_centered_trick": True,
        "quadrature": 0,
        "max_rejections": 3,
        "target_refit": "continue",
        "target_iters": 50,
        "target_lr": 0.01,
        "target_momentum": 0.9,
        "target_optimizer": "adam",
        "target_batch_size": 128,
        "target_ema_decay": 0.0,
    },
    "eval": {
        "n_eval": 2000,
        "every": 0,
        "n_test_x": 16,
        "n_trajectories": 64,
        "sde_steps": 200,
        "sinkhorn_points": 200,
        "sinkhorn_max_iters": 10000,
        "sinkhorn_tol": 1e-10,
    },
    "output": {
        "dir": "runs",
        "plots": False,
    },
}

_CHOICES = {
    ("problem", "preset"): ("gauss_to_ring8", "gauss_to_gauss", "custom"),
    ("model", "init"): ("data", "randn"),
    ("schedule", "kind"): ("harmonic", "inverse"),
    ("trainer", "target_refit"): ("fresh", "continue"),
    ("trainer", "target_optimizer"): ("sgd", "adam"),
}


class ConfigError(ValueError):
    """Raised with the full list of violated fields in ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def load_config(path, overrides=None):
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return resolve_config(raw, overrides)


def resolve_config(raw=None, overrides=None):
    """Merge ``raw`` (and ``overrides``) into the defaults and validate."""
    cfg = copy.deepcopy(DEFAULTS)
    errors = []
    for source in (raw or {}, overrides or {}):
        for section, values in source.items():
            if section not in cfg:
                errors.append(f"unknown section [{section}]")
                continue
            if not isinstance(values, dict):
                errors.append(f"[{section}] must be a table")
                continue
            for key, value in values.items():
                if key not in cfg[section]:
                    errors.append(f"unknown key {section}.{key}")
                    continue
                cfg[section][key] = value
    errors.extend(_validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def _type_errors(cfg):
    errors = []
    for section, values in DEFAULTS.items():
        for key, default in values.items():
            value = cfg[section][key]
            name = f"{section}.{key}"
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            else:
                ok = isinstance(value, type(default))
            if not ok:
                errors.append(f"{name}: expected {type(default).__name__}, got {value!r}")
    return errors


def _validate(cfg):
    errors = _type_errors(cfg)
    if errors:
        return errors
    for (section, key), allowed in _CHOICES.items():
        if cfg[section][key] not in allowed:
            errors.append(f"{section}.{key}: must be one of {allowed}, got {cfg[section][key]!r}")

    p, m, s, tr, ev = (cfg[k] for k in ("problem", "model", "schedule", "trainer", "eval"))
    positive = [("problem", "epsilon"), ("model", "init_cov"), ("trainer", "h"),
                ("trainer", "target_lr"), ("eval", "sinkhorn_tol"), ("problem", "window_width")]
    at_least_one = [("problem", "d"), ("problem", "n_train"), ("problem", "rotation_period"),
                    ("model", "n_components"), ("schedule", "total_steps"),
                    ("trainer", "inner_steps"), ("trainer", "batch_size"), ("trainer", "n_y"),
                    ("trainer", "max_rejections"), ("trainer", "target_batch_size"),
                    ("eval", "n_test_x"), ("eval", "n_trajectories"), ("eval", "sinkhorn_points"),
                    ("eval", "sinkhorn_max_iters")]
    non_negative = [("trainer", "quadrature"), ("trainer", "target_iters"), ("eval", "every"),
                    ("problem", "seed")]
    for section, key in positive:
        if not cfg[section][key] > 0:
            errors.append(f"{section}.{key}: must be positive, got {cfg[section][key]!r}")
    for section, key in at_least_one:
        if cfg[section][key] < 1:
            errors.append(f"{section}.{key}: must be at least 1, got {cfg[section][key]!r}")
    for section, key in non_negative:
        if cfg[section][key] < 0:
            errors.append(f"{section}.{key}: must be non-negative, got {cfg[section][key]!r}")
    if ev["n_eval"] < 2:
        errors.append(f"eval.n_eval: must be at least 2, got {ev['n_eval']!r}")
    if ev["sde_steps"] < 2:
        errors.append(f"eval.sde_steps: must be at least 2, got {ev['sde_steps']!r}")
    if not 0.0 <= tr["target_momentum"] < 1.0:
        errors.append(f"trainer.target_momentum: must lie in [0, 1), got {tr['target_momentum']!r}")
    if not 0.0 <= tr["target_ema_decay"] < 1.0:
        errors.append(f"trainer.target_ema_decay: must lie in [0, 1), got {tr['target_ema_decay']!r}")
    if not 0.0 < s["eta_T"] <= s["eta_1"] <= 1.0:
        errors.append(f"schedule.eta_1/eta_T: need 1 >= eta_1 >= eta_T > 0, got {s['eta_1']!r}, {s['eta_T']!r}")
    if not 0.0 <= s["warmup_fraction"] < 1.0:
        errors.append(f"schedule.warmup_fraction: must lie in [0, 1), got {s['warmup_fraction']!r}")
    if p["window_width"] > 0:
        n_win = 1.0 / p["window_width"]
        if p["window_width"] > 1 or abs(n_win - round(n_win)) > 1e-9:
            errors.append(f"problem.window_width: must be 1 / (number of sectors), got {p['window_width']!r}")
    if not errors:
        try:
            problem_spec(cfg)
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"problem: invalid distribution descriptor ({exc})")
    return errors


def problem_spec(cfg):
    """The :class:`ProblemSpec` described by ``cfg["problem"]``."""
    p = cfg["problem"]
    if p["preset"] == "gauss_to_ring8":
        return PRESETS["gauss_to_ring8"](epsilon=float(p["epsilon"]), seed=p["seed"])
    if p["preset"] == "gauss_to_gauss":
        return PRESETS["gauss_to_gauss"](d=p["d"], epsilon=float(p["epsilon"]), seed=p["seed"])
    for side in ("mu", "nu"):
        to_mixture(p[side], p["d"])
    return ProblemSpec(p["name"] or "custom", p["d"], p["mu"], p["nu"], float(p["epsilon"]), p["seed"])


def schedule_of(cfg):
    s = cfg["schedule"]
    return OmdSchedule(float(s["eta_1"]), float(s["eta_T"]), s["total_steps"],
                       float(s["warmup_fraction"]), s["kind"])


def trainer_config(cfg, seed):
    tr = cfg["trainer"]
    return TrainerConfig(
        inner_steps=tr["inner_steps"], h=float(tr["h"]), batch_size=tr["batch_size"],
        n_y=tr["n_y"], zero_centered_trick=tr["zero_centered_trick"], seed=seed,
        schedule=schedule_of(cfg), quadrature=tr["quadrature"] or None,
        max_rejections=tr["max_rejections"],
    )


def fit_config(cfg, seed, n_iters=None):
    tr, m = cfg["trainer"], cfg["model"]
    return FitConfig(
        n_components=m["n_components"], epsilon=float(cfg["problem"]["epsilon"]),
        n_iters=tr["target_iters"] if n_iters is None else n_iters,
        lr=float(tr["target_lr"]), momentum=float(tr["target_momentum"]),
        batch_size=tr["target_batch_size"], seed=seed, init_cov=float(m["init_cov"]),
        optimizer=tr["target_optimizer"],
    )


def config_hash(cfg):
    """Short stable digest of the resolved config (the output path ignores ``output``)."""
    payload = {k: v for k, v in cfg.items() if k != "output"}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def to_toml(cfg):
    """Render a resolved config back to TOML (flat values and inline tables)."""
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + " }"
    raise TypeError(f"cannot render {value!r} as TOML")
