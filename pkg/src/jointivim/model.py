"""Bi-exponential IVIM signal model and bounded parameter maps.

Parameter ordering used for stacked arrays throughout the package is
``(D, f, Dstar)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.special import expit, logit

from .errors import InvalidArgumentError, ShapeMismatchError

DEFAULT_BVALUES = (0.0, 50.0, 100.0, 200.0, 400.0, 600.0)
PARAM_NAMES = ("D", "f", "Dstar")


@dataclass(frozen=True)
class BValueSchedule:
    """Ascending b-values in s/mm^2 starting at 0."""

    values: tuple = DEFAULT_BVALUES

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 4:
            raise InvalidArgumentError(f"need at least 4 b-values, got {len(vals)}")
        if vals[0] != 0.0:
            raise InvalidArgumentError("first b-value must be 0")
        if any(b1 <= b0 for b0, b1 in zip(vals, vals[1:])):
            raise InvalidArgumentError(f"b-values must be strictly increasing: {vals}")

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class ParamBounds:
    """Closed (min, max) intervals for D (mm^2/s), f and Dstar (mm^2/s)."""

    D: tuple = (0.0003, 0.0032)
    f: tuple = (0.07, 0.50)
    Dstar: tuple = (0.006, 0.15)

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = (float(v) for v in getattr(self, name))
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
                raise InvalidArgumentError(f"bounds for {name} must satisfy min < max, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))

    def lower(self) -> np.ndarray:
        return np.array([getattr(self, n)[0] for n in PARAM_NAMES])

    def upper(self) -> np.ndarray:
        return np.array([getattr(self, n)[1] for n in PARAM_NAMES])

    def mid(self) -> np.ndarray:
        return 0.5 * (self.lower() + self.upper())

    def to_dict(self) -> dict:
        return {n: list(getattr(self, n)) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        unknown = set(d) - set(PARAM_NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown bound keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


DEFAULT_BOUNDS = ParamBounds()


@dataclass
class IvimParams:
    D: float
    Dstar: float
    f: float
    S0: float = 1.0

    def check(self, bounds: ParamBounds = DEFAULT_BOUNDS) -> None:
        """Raise if outside ``bounds``; warn when Dstar <= D."""
        for name in PARAM_NAMES:
            lo, hi = getattr(bounds, name)
            val = np.asarray(getattr(self, name))
            if np.any(val < lo) or np.any(val > hi):
                raise InvalidArgumentError(f"{name}={val} outside bounds ({lo}, {hi})")
        if np.any(np.asarray(self.S0) < 0):
            raise InvalidArgumentError("S0 must be non-negative")
        if np.any(np.asarray(self.Dstar) <= np.asarray(self.D)):
            warnings.warn("Dstar <= D: pseudo-diffusion is not faster than diffusion", stacklevel=2)


@dataclass
class IvimMaps:
    """Per-pixel parameter maps; S0 is carried along but never optimized."""

    D: np.ndarray
    Dstar: np.ndarray
    f: np.ndarray
    S0: np.ndarray
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        shape = np.shape(self.S0)
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} map shape {arr.shape} != S0 shape {shape}")
            lo, hi = getattr(self.bounds, name)
            if np.any(arr < lo) or np.any(arr > hi) or not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} map leaves its bounds ({lo}, {hi})")
            setattr(self, name, arr)
        self.S0 = np.asarray(self.S0, dtype=np.float64)

    @property
    def shape(self):
        return self.S0.shape

    def stacked(self) -> np.ndarray:
        """Maps stacked as (3, H, W) in (D, f, Dstar) order."""
        return np.stack([self.D, self.f, self.Dstar])

    @classmethod
    def uniform(cls, shape, D, Dstar, f, S0=1.0, bounds=DEFAULT_BOUNDS) -> "IvimMaps":
        return cls(D=np.full(shape, D), Dstar=np.full(shape, Dstar), f=np.full(shape, f),
                   S0=np.full(shape, S0, dtype=np.float64), bounds=bounds)


def _exp_expm1(*xs):
    if any(torch.is_tensor(x) for x in xs):
        return torch.exp, torch.expm1
    return np.exp, np.expm1


def signal_model(b, s0, f, d, dstar):
    """Broadcasting IVIM signal for numpy arrays or torch tensors.

    Written as ``S0 e^{-bD} (1 + f (e^{-b D*} - 1))`` which equals the usual
    two-compartment sum but returns S0 bit-exactly at b = 0.
    """
    exp, expm1 = _exp_expm1(b, d, dstar)
    return s0 * exp(-b * d) * (1.0 + f * expm1(-b * dstar))


def ivim_signal(params: IvimParams, b) -> np.ndarray | float:
    """Signal intensity of one voxel at b-value(s) ``b``."""
    vals = [params.S0, params.f, params.D, params.Dstar, b]
    if not all(np.all(np.isfinite(np.asarray(v, dtype=np.float64))) for v in vals):
        raise InvalidArgumentError("ivim_signal requires finite inputs")
    if np.any(np.asarray(b) < 0):
        raise InvalidArgumentError("b-values must be non-negative")
    out = signal_model(np.asarray(b, dtype=np.float64), float(params.S0), float(params.f),
                       float(params.D), float(params.Dstar))
    return float(out) if np.ndim(out) == 0 else out


def reconstruct_series(maps: IvimMaps, schedule: BValueSchedule | Sequence[float]) -> np.ndarray:
    """Model images R(b_i) stacked as (n_b, H, W)."""
    b = np.asarray(schedule.values if isinstance(schedule, BValueSchedule) else schedule,
                   dtype=np.float64).reshape(-1, *([1] * len(maps.shape)))
    if b.size == 0:
        return np.zeros((0, *maps.shape))
    return signal_model(b, maps.S0[None], maps.f[None], maps.D[None], maps.Dstar[None])


def bound_transform(latent, lo: float, hi: float):
    """Map an unconstrained latent to ``lo + sigmoid(latent) * (hi - lo)``."""
    if torch.is_tensor(latent):
        return lo + torch.sigmoid(latent) * (hi - lo)
    return lo + expit(np.asarray(latent, dtype=np.float64)) * (hi - lo)


def bound_inverse(value, lo: float, hi: float):
    """Latent whose bound transform is ``value``; inputs are clamped 1e-6*(hi-lo) inside."""
    eps = 1e-6 * (hi - lo)
    p = np.clip(np.asarray(value, dtype=np.float64), lo + eps, hi - eps)
    return logit((p - lo) / (hi - lo))


def maps_from_latents(latents, s0, bounds: ParamBounds = DEFAULT_BOUNDS):
    """Bounded (D, f, Dstar) from latents stacked on axis -3; numpy or torch."""
    return tuple(bound_transform(latents[..., k, :, :], *getattr(bounds, name))
                 for k, name in enumerate(PARAM_NAMES))


def latents_from_maps(maps: IvimMaps) -> np.ndarray:
    return np.stack([bound_inverse(getattr(maps, n), *getattr(maps.bounds, n)) for n in PARAM_NAMES])
