"""Run configuration: JSON schema, defaults and resolution into typed specs."""

import copy
import json

import jsonschema

from .data import DatasetSpec, SOURCES
from .diagnostics import ESTIMATORS
from .errors import ConfigError
from .models import Hyperparams
from .samplers import INITS, MODELS, ChainSpec, HmcConfig

_POS = {"type": "number", "exclusiveMinimum": 0}
_RATE = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_COUNT = {"type": "integer", "minimum": 1}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "stiefel-mc run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": list(SOURCES)},
                "dir": {"type": "string"},
                "path": {"type": "string"},
                "m": _COUNT,
                "n": _COUNT,
                "rank": _COUNT,
                "train_rate": _RATE,
                "holdout_rate": _RATE,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "model": {"enum": list(MODELS)},
        "rank": _COUNT,
        "k": _COUNT,
        "hyperparams": {
            "type": "object",
            "additionalProperties": False,
            "properties": {name: _POS for name in
                           ("lam", "alpha_sigma", "beta_sigma", "alpha_delta", "beta_delta")},
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iters": {"type": "integer", "minimum": 0},
                "burnin": {"type": "integer", "minimum": 0},
                "thin": _COUNT,
                "steps": _COUNT,
                "epsilon": _POS,
                "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "adapt_iters": {"type": "integer", "minimum": 0},
                "jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "init": {"enum": list(INITS)},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "estimator": {"enum": list(ESTIMATORS)},
        "chains": _COUNT,
        "deterministic": {"type": "boolean"},
    },
}

DEFAULTS = {
    "dataset": {"source": "synthetic-case-1", "m": 100, "n": 60, "rank": 10,
                "train_rate": 0.4, "holdout_rate": 0.4, "seed": 0},
    "model": "svd",
    "k": 10,
    "hyperparams": {"lam": 1.0, "alpha_sigma": 1e-4, "beta_sigma": 1e-4,
                    "alpha_delta": 1e-4, "beta_delta": 1e-4},
    "sampler": {"iters": 10000, "burnin": 2000, "thin": 10, "steps": 10, "epsilon": 0.05,
                "target_accept": 0.8, "adapt_iters": 2000, "jitter": 0.2, "init": "uniform"},
    "seed": 0,
    "out": "run",
    "estimator": "posterior-mean",
    "chains": 1,
    "deterministic": False,
}

# real datasets: fitted rank 20; MovieLens uses an 80/20 split of the ratings
_SOURCE_DEFAULTS = {
    "movielens-csv": {"rank": 20, "train_rate": 0.8, "holdout_rate": 0.2},
    "mice-csv": {"rank": 20, "train_rate": 0.4, "holdout_rate": 0.4},
}


def validate(raw):
    try:
        jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def resolve(raw=None, **overrides):
    """Validate ``raw`` and fill every default; returns a plain dict.

    Keyword overrides (``seed``, ``out``, ``chains``, ``deterministic``) are
    applied after validation when not ``None``.
    """
    raw = copy.deepcopy(raw or {})
    validate(raw)
    cfg = copy.deepcopy(DEFAULTS)
    source = raw.get("dataset", {}).get("source", cfg["dataset"]["source"])
    cfg["dataset"].update(_SOURCE_DEFAULTS.get(source, {}))
    for key, val in raw.items():
        if isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    if "rank" not in raw:
        cfg["rank"] = cfg["dataset"]["rank"]
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    validate(cfg)
    s = cfg["sampler"]
    if s["burnin"] > s["iters"]:
        raise ConfigError("sampler.burnin exceeds sampler.iters")
    if cfg["model"] == "ab-gibbs" and cfg["dataset"]["source"] == "synthetic-case-3":
        raise ConfigError("ab-gibbs has a Gaussian likelihood; binomial count data needs model b-svd")
    return cfg


def load(path, **overrides):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(raw, **overrides)


def dataset_spec(cfg):
    d = dict(cfg["dataset"])
    d.pop("dir", None)
    return DatasetSpec(k=cfg["k"], **d)


def chain_spec(cfg):
    s = cfg["sampler"]
    hmc = HmcConfig(epsilon=s["epsilon"], steps=s["steps"], target_accept=s["target_accept"],
                    adapt_iters=s["adapt_iters"], jitter=s["jitter"])
    return ChainSpec(model=cfg["model"], rank=cfg["rank"], k=cfg["k"],
                     hp=Hyperparams(**cfg["hyperparams"]), hmc=hmc, init=s["init"])
