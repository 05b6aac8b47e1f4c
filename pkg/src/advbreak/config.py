"""Flat, namespaced run configuration (``train.lr``, ``attack.kappa``, ...).

A config file is one JSON object mapping keys to values; unknown keys and
values of the wrong type are rejected.  Precedence: defaults < file < flags.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .attacks import AttackConfig
from .evaluation import EvalProtocol
from .training import AETrainConfig, TrainConfig

OUTPUT_ENV = "ADVBREAK_OUT"

DEFAULTS: dict = {
    "data.mnist_dir": None,
    "data.n_train": 20000,
    "data.n_val": 5000,
    "data.n_test": 5000,
    "data.synthetic_seed": 1,
    "train.epochs": 10,
    "train.batch_size": 64,
    "train.lr": 1e-3,
    "train.optimizer": "adam",
    "train.seed": 7,
    "train.augment_sigma": 0.0,
    "train.activation": "relu",
    "ae.epochs": 12,
    "ae.batch_size": 64,
    "ae.lr": 2e-3,
    "ae.optimizer": "adam",
    "ae.noise_sigma": 0.1,
    "ae.samples": 10000,
    "preproc.epochs": 8,
    "preproc.batch_size": 64,
    "preproc.lr": 1e-3,
    "preproc.optimizer": "adam",
    "preproc.seed": 11,
    "preproc.samples": 10000,
    "fgsm.epsilon": 0.3,
    **{f"attack.{k}": v for k, v in AttackConfig().to_dict().items()},
    "eval.instances": 100,
    "eval.start": 0,
    "eval.target_seed": 0,
    "greybox.ensemble_size": 32,
    "greybox.defender_size": 16,
    "greybox.attacker_fpr": 0.01,
    "greybox.defender_fpr": 0.001,
    "calibrate.budget": "per_detector",
    "calibrate.jsd_temperatures": [],
    "output.dir": None,
}

# keys whose default is None still need a declared type
_TYPES = {"data.mnist_dir": str, "attack.initial_c": float, "output.dir": str}


class ConfigError(ValueError):
    pass


def _expected_type(key):
    if key in _TYPES:
        return _TYPES[key]
    return type(DEFAULTS[key])


def coerce(key: str, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    if value is None:
        if DEFAULTS[key] is not None:
            raise ConfigError(f"{key} may not be null")
        return None
    want = _expected_type(key)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool and not isinstance(value, bool):
        raise ConfigError(f"{key} expects true/false, got {value!r}")
    if want is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key} expects an integer, got {value!r}")
    if not isinstance(value, want):
        raise ConfigError(f"{key} expects {want.__name__}, got {value!r}")
    if want is list and not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{key} expects a list of numbers, got {value!r}")
    return value


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for k, v in doc.items():
            cfg[k] = coerce(k, v)
    for k, v in (overrides or {}).items():
        cfg[k] = coerce(k, v)
    return cfg


def output_dir(cfg: dict, flag=None) -> Path:
    return Path(flag or cfg["output.dir"] or os.environ.get(OUTPUT_ENV) or "advbreak-out")


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def _build(factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def train_config(cfg: dict) -> TrainConfig:
    t = section(cfg, "train")
    return _build(TrainConfig, epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                  optimizer=t["optimizer"], augment_sigma=t["augment_sigma"], seed=t["seed"])


def ae_config(cfg: dict, seed: int) -> AETrainConfig:
    a = section(cfg, "ae")
    return _build(AETrainConfig, epochs=a["epochs"], batch_size=a["batch_size"], lr=a["lr"],
                  optimizer=a["optimizer"], ae_noise_sigma=a["noise_sigma"], seed=seed)


def preproc_config(cfg: dict) -> TrainConfig:
    p = section(cfg, "preproc")
    return _build(TrainConfig, epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"],
                  optimizer=p["optimizer"], seed=p["seed"])


def attack_config(cfg: dict) -> AttackConfig:
    return _build(AttackConfig, **section(cfg, "attack"))


def protocol(cfg: dict, kind: str) -> EvalProtocol:
    e, g = section(cfg, "eval"), section(cfg, "greybox")
    return _build(EvalProtocol, kind=kind, instances=e["instances"], start=e["start"],
                  target_seed=e["target_seed"], attack=attack_config(cfg), ensemble_size=g["ensemble_size"],
                  defender_size=g["defender_size"], attacker_fpr=g["attacker_fpr"],
                  defender_fpr=g["defender_fpr"])
