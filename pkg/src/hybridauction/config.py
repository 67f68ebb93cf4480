"""Experiment configuration: flat ``key = value`` files, profiles and env overrides.

Files use TOML syntax restricted to top-level scalar or list keys. Any key can
be overridden by an environment variable ``HAUCTION_<KEY>`` (upper case), whose
text is parsed as a TOML value (bare words are taken as strings).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import PopulationSpec
from .metrics import EvalConfig
from .training import TrainConfig

ENV_PREFIX = "HAUCTION_"
PROFILES = {
    "fast": {"train_samples": 100_000, "test_samples": 12_800},
    "full": {"train_samples": 640_000, "test_samples": 12_800, "iterations": 30_000},
}

# key -> (section, field name in that section)
_POP = {f.name: ("population", f.name) for f in fields(PopulationSpec)}
_TRAIN = {f.name: ("train", f.name) for f in fields(TrainConfig) if f.name != "seed"}
_EVAL = {
    "eval_restarts": ("eval", "restarts"),
    "eval_steps": ("eval", "ascent_steps"),
    "eval_lr": ("eval", "ascent_lr"),
    "eval_chunk": ("eval", "chunk"),
    "vcg_grid_points": ("eval", "grid_points"),
    "vcg_regret_samples": ("eval", "vcg_regret_samples"),
}
_TOP = {k: ("top", k) for k in ("seed", "profile", "mechanism", "pivot", "train_samples", "test_samples")}
KEYS = {**_POP, **_TRAIN, **_EVAL, **_TOP}


class ConfigError(ValueError):
    """Unknown key, bad value or unreadable config file."""


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationSpec
    train: TrainConfig
    eval: EvalConfig
    seed: int = 0
    profile: str = "fast"
    mechanism: str = "hregnet"
    pivot: str = "zero_bid"
    train_samples: int = 100_000
    test_samples: int = 12_800

    @property
    def C(self) -> int:
        return self.population.C

    def to_dict(self) -> dict:
        return {
            "population": self.population.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "seed": self.seed,
            "profile": self.profile,
            "mechanism": self.mechanism,
            "pivot": self.pivot,
            "train_samples": self.train_samples,
            "test_samples": self.test_samples,
        }

    def data_dict(self) -> dict:
        """Everything the generated datasets depend on."""
        return {"population": self.population.to_dict(), "seed": self.seed,
                "train_samples": self.train_samples, "test_samples": self.test_samples}

    def hash(self, part: str = "all") -> str:
        d = {"all": self.to_dict(), "data": self.data_dict()}[part]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ConfigError(f"{source}: tables are not allowed ({k!r}); use flat keys")
    return raw


def _parse_env_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            out[k[len(ENV_PREFIX):].lower()] = _parse_env_value(v)
    return out


def build_config(values: dict) -> ExperimentConfig:
    """Assemble an :class:`ExperimentConfig` from flat keys (profile defaults applied first)."""
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    profile = values.get("profile", "fast")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    merged = {**PROFILES[profile], **values}
    parts = {"population": {}, "train": {}, "eval": {}, "top": {}}
    for k, v in merged.items():
        sec, name = KEYS[k]
        parts[sec][name] = v
    top = parts["top"]
    seed = top.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if top.get("mechanism", "hregnet") not in ("hregnet", "vcg"):
        raise ConfigError("mechanism must be 'hregnet' or 'vcg'")
    if top.get("pivot", "zero_bid") not in ("zero_bid", "remove"):
        raise ConfigError("pivot must be 'zero_bid' or 'remove'")
    for k in ("train_samples", "test_samples"):
        if k in top and (not isinstance(top[k], int) or top[k] < 1):
            raise ConfigError(f"{k} must be a positive integer")
    try:
        pop = PopulationSpec(**parts["population"])
        tr = TrainConfig(seed=seed, **parts["train"])
        ev = EvalConfig(seed=seed, **parts["eval"])
        return ExperimentConfig(pop, tr, ev, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """File values, then environment overrides, then explicit ``overrides`` (e.g. CLI flags)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_text(text, str(path)))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)
