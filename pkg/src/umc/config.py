"""YAML/JSON run configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .env import EnvConfig
from .evaluate import DEFAULT_SETTINGS, InferenceSetting
from .policy import ModelConfig
from .ppo import PpoHyper
from .train import DamageConfig, TrainConfig

SECTIONS = ("seed", "paradigm", "train", "model", "env", "damage", "ppo", "stage2", "mask", "eval")


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_settings: tuple = DEFAULT_SETTINGS
    eval_envs: int = 256


def _build(cls, data, where: str, **extra):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _check_keys(data: dict, allowed, where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_settings(items) -> tuple[InferenceSetting, ...]:
    if not isinstance(items, list) or not items:
        raise ConfigError("eval.settings must be a non-empty list")
    return tuple(_build(InferenceSetting, d, f"eval.settings[{i}]") for i, d in enumerate(items))


def config_from_dict(data: dict) -> RunConfig:
    """Build a :class:`RunConfig`; absent sections keep their defaults."""
    data = dict(data or {})
    _check_keys(data, SECTIONS, "config")
    train_sec = dict(data.get("train") or {})
    _check_keys(train_sec, ("stage1_iters", "stage2_iters", "strict"), "train")
    stage2 = dict(data.get("stage2") or {})
    _check_keys(stage2, ("ratios",), "stage2")
    mask = dict(data.get("mask") or {})
    _check_keys(mask, ("value",), "mask")
    ev = dict(data.get("eval") or {})
    _check_keys(ev, ("settings", "n_envs"), "eval")

    env = _build(EnvConfig, data.get("env"), "env")
    model_sec = dict(data.get("model") or {})
    model_sec.setdefault("n_joints", env.n_joints)
    model = _build(ModelConfig, model_sec, "model")
    kw = dict(
        env=env,
        model=model,
        ppo=_build(PpoHyper, data.get("ppo"), "ppo"),
        damage=_build(DamageConfig, data.get("damage"), "damage"),
        **train_sec,
    )
    for key, val in (("seed", data.get("seed")), ("paradigm", data.get("paradigm")),
                     ("stage2_ratios", stage2.get("ratios")), ("mask_value", mask.get("value"))):
        if val is not None:
            kw[key] = tuple(val) if isinstance(val, list) else val
    try:
        train = TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc
    settings = parse_settings(ev["settings"]) if "settings" in ev else DEFAULT_SETTINGS
    return RunConfig(train, settings, int(ev.get("n_envs", 256)))


def read_structured(path) -> dict:
    """Parse a YAML or JSON file into a dict (empty files give ``{}``)."""
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, (dict, list)):
        raise ConfigError(f"{path} must hold a mapping")
    return data


def load_config(path) -> RunConfig:
    data = read_structured(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return config_from_dict(data)


def load_settings(path) -> tuple[InferenceSetting, ...]:
    """Inference settings from a file holding a list, ``{settings: [...]}`` or a full config."""
    data = read_structured(path)
    if isinstance(data, list):
        return parse_settings(data)
    if "settings" in data and len(data) == 1:
        return parse_settings(data["settings"])
    return config_from_dict(data).eval_settings


def with_train(run: RunConfig, **kw) -> RunConfig:
    try:
        return replace(run, train=replace(run.train, **kw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
