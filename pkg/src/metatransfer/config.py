"""Run configuration: profiles, flat ``key = value`` files and overrides.

Keys are ``section.field`` names, e.g. ``pretrain.lr`` or ``meta.inner_epochs``.
Resolution order, later wins: profile defaults, config file, command-line
overrides. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

from .curriculum import CurriculumConfig
from .meta import MetaConfig
from .models import VARIANTS
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


PROFILES = ("quickstart", "paper")

# data generation and run sizes live outside the library dataclasses
_DATA_DEFAULTS = {
    "data.classes": 100,
    "data.samples_per_class": 60,
    "data.channels": 3,
    "data.height": 16,
    "data.width": 16,
}
_RUN_DEFAULTS = {
    "run.meta_train_tasks": 2000,
    "run.val_every": 500,
    "run.val_tasks": 100,
    "run.test_tasks": 100,
}

_PROFILE_OVERRIDES = {
    "quickstart": {
        "pretrain.max_iterations": 2000,
    },
    # published settings; 5-shot runs should also set meta.inner_epochs = 60
    "paper": {
        "pretrain.max_iterations": 10000,
        "meta.inner_epochs": 20,
        "meta.eval_query": 1,
        "run.meta_train_tasks": 20000,
        "run.val_tasks": 600,
        "run.test_tasks": 600,
    },
}


def _section_defaults(prefix: str, cls) -> dict:
    inst = cls()
    out = {}
    for f in fields(cls):
        if f.init is False:
            continue
        value = getattr(inst, f.name)
        if f.name == "variant":
            value = next(k for k, v in VARIANTS.items() if v == value)
        out[f"{prefix}.{f.name}"] = value
    return out


def base_defaults() -> dict:
    out = {}
    out.update(_DATA_DEFAULTS)
    out.update(_section_defaults("pretrain", PretrainConfig))
    out.update(_section_defaults("meta", MetaConfig))
    out.update(_section_defaults("curriculum", CurriculumConfig))
    out.update(_RUN_DEFAULTS)
    return out


_OPTIONAL_INT = {"curriculum.hard_tasks"}


def parse_value(key: str, text: str, like):
    """Convert ``text`` to the type of the default ``like``."""
    t = text.strip()
    try:
        if key in _OPTIONAL_INT:
            return None if t.lower() in ("none", "auto", "") else int(t)
        if isinstance(like, bool):
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return t


def parse_text(text: str) -> dict:
    """Raw ``key -> string`` pairs from config text. ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Fully resolved settings for one command."""

    def __init__(self, values: dict, profile: str):
        self.values = dict(values)
        self.profile = profile

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.section("pretrain"))

    def meta_config(self) -> MetaConfig:
        kw = self.section("meta")
        name = kw.pop("variant")
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        return MetaConfig(variant=VARIANTS[name], **kw)

    def curriculum_config(self) -> CurriculumConfig:
        return CurriculumConfig(**self.section("curriculum"))

    def validate(self) -> "RunConfig":
        try:
            self.pretrain_config()
            self.meta_config()
            self.curriculum_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for key in ("run.meta_train_tasks", "run.val_tasks", "run.test_tasks"):
            if self.values[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.values["run.val_every"] < 0:
            raise ConfigError("run.val_every must be >= 0")
        return self

    def as_dict(self) -> dict:
        return {"profile": self.profile, **self.values}

    def render(self) -> str:
        lines = [f"profile = {self.profile}"]
        for k in sorted(self.values):
            v = self.values[k]
            lines.append(f"{k} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


def resolve(
    profile: Optional[str] = None,
    file_text: Optional[str] = None,
    overrides: Optional[dict] = None,
) -> RunConfig:
    """Profile defaults < file values < ``overrides`` (string or typed values)."""
    raw_file = parse_text(file_text) if file_text else {}
    overrides = dict(overrides or {})
    chosen = overrides.pop("profile", None) or profile or raw_file.pop("profile", None) or "quickstart"
    raw_file.pop("profile", None)
    if chosen not in PROFILES:
        raise ConfigError(f"unknown profile {chosen!r}; choose from {PROFILES}")
    defaults = base_defaults()
    values = dict(defaults)
    values.update(_PROFILE_OVERRIDES[chosen])
    for source in (raw_file, overrides):
        for key, value in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = parse_value(key, value, defaults[key]) if isinstance(value, str) else value
    return RunConfig(values, chosen).validate()


def load(path: Optional[str], profile: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    text = None
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    return resolve(profile, text, overrides)
