"""Run configuration: one strict tree of dataclasses read from JSON or YAML."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .baselines import RegistrationSettings
from .errors import ConfigError
from .joint import OptConfig
from .losses import LossConfig
from .model import DEFAULT_BOUNDS, ParamBounds
from .phantom import PhantomSpec

TUPLE_FIELDS = {"shape", "bvalues", "f_gradient"}


def build(cls, data, where: str = ""):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping, got {type(data).__name__}")
    if cls is ParamBounds:
        try:
            return ParamBounds.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in TUPLE_FIELDS and v is not None:
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. ``loss`` and ``seed`` override the copies
    inside ``opt``."""

    loss: LossConfig = field(default_factory=LossConfig)
    opt: OptConfig = field(default_factory=OptConfig)
    bounds: ParamBounds = DEFAULT_BOUNDS
    baseline: RegistrationSettings = field(default_factory=RegistrationSettings)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    seed: int = 0
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        opt = data.get("opt", {})
        if isinstance(opt, dict) and "loss" in opt:
            raise ConfigError("opt.loss is not allowed; set the top-level 'loss' section")
        kw = {
            "loss": build(LossConfig, data.get("loss", {}), "loss"),
            "bounds": build(ParamBounds, data.get("bounds", DEFAULT_BOUNDS.to_dict()), "bounds"),
            "baseline": build(RegistrationSettings, data.get("baseline", {}), "baseline"),
            "phantom": build(PhantomSpec, data.get("phantom", {}), "phantom"),
        }
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["opt"] = build(OptConfig, opt, "opt")
        return cls(seed=seed, out=data.get("out"), **kw)

    def opt_config(self) -> OptConfig:
        return replace(self.opt, loss=self.loss, seed=self.seed)

    def to_dict(self) -> dict:
        opt = dataclasses.asdict(self.opt)
        opt.pop("loss")
        return {
            "loss": dataclasses.asdict(self.loss),
            "opt": opt,
            "bounds": self.bounds.to_dict(),
            "baseline": dataclasses.asdict(self.baseline),
            "phantom": self.phantom.to_dict(),
            "seed": self.seed,
            "out": self.out,
        }


def read_mapping(path) -> dict:
    """Parse a JSON or YAML file into a dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not parseable: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path=None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.from_dict(read_mapping(path))
