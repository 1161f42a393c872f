"""The in-memory DWI case and its normalization."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, ShapeMismatchError
from .model import BValueSchedule

NORMALIZATION_QUANTILE = 0.99


@dataclass
class DwiCase:
    """One subject's 2D slice: images stacked as (n_b, H, W) in schedule order.

    ``mask`` is the analysis mask, ``roi`` the lung region of interest drawn on
    the b=0 image and ``lung_masks`` one lung mask per b-value image.
    ``norm_divisor`` is set once the case has been normalized.
    """

    images: np.ndarray
    schedule: BValueSchedule
    mask: Optional[np.ndarray] = None
    roi: Optional[np.ndarray] = None
    lung_masks: Optional[np.ndarray] = None
    ga_weeks: Optional[float] = None
    norm_divisor: Optional[float] = None
    case_id: str = ""

    def __post_init__(self):
        if not isinstance(self.schedule, BValueSchedule):
            self.schedule = BValueSchedule(tuple(self.schedule))
        self.images = np.asarray(self.images)
        if self.images.ndim != 3:
            raise ShapeMismatchError(f"images must be (n_b, H, W), got shape {self.images.shape}")
        if self.images.shape[0] != len(self.schedule):
            raise ShapeMismatchError(
                f"{self.images.shape[0]} images but {len(self.schedule)} b-values")
        if not np.all(np.isfinite(self.images)):
            raise InvalidArgumentError("images contain non-finite values")
        if np.any(self.images < 0):
            raise InvalidArgumentError("images contain negative intensities")
        for name in ("mask", "roi"):
            m = getattr(self, name)
            if m is not None:
                m = np.asarray(m).astype(bool)
                if m.shape != self.shape:
                    raise ShapeMismatchError(f"{name} shape {m.shape} != image shape {self.shape}")
                setattr(self, name, m)
        if self.lung_masks is not None:
            lm = np.asarray(self.lung_masks).astype(bool)
            if lm.shape != self.images.shape:
                raise ShapeMismatchError(f"lung_masks shape {lm.shape} != stack shape {self.images.shape}")
            self.lung_masks = lm
        if self.ga_weeks is not None and not self.ga_weeks > 0:
            raise InvalidArgumentError("gestational age must be positive")

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def bvalues(self) -> np.ndarray:
        return self.schedule.as_array()

    @property
    def n_images(self) -> int:
        return self.images.shape[0]

    def with_images(self, images, **changes) -> "DwiCase":
        return replace(self, images=np.asarray(images), **changes)


def quantile_linear(x, q: float) -> float:
    """Quantile by linear interpolation between order statistics."""
    return float(np.quantile(np.asarray(x, dtype=np.float64).ravel(), q, method="linear"))


def normalize_case(case: DwiCase) -> DwiCase:
    """Divide every image by the 0.99 quantile of the b=0 image (once)."""
    if case.norm_divisor is not None:
        return case
    q = quantile_linear(case.images[0], NORMALIZATION_QUANTILE)
    if not q > 0:
        raise DegenerateInputError("b=0 image has a non-positive 0.99 quantile")
    return case.with_images(case.images / q, norm_divisor=q)


def _crop_or_pad_axis(arr, size, axis):
    n = arr.shape[axis]
    if n > size:
        start = (n - size) // 2
        return np.take(arr, np.arange(start, start + size), axis=axis)
    if n < size:
        before = (size - n) // 2
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (before, size - n - before)
        return np.pad(arr, pad)
    return arr


def crop_or_pad(case: DwiCase, shape=(96, 96)) -> DwiCase:
    """Center-anchored crop (or zero pad) of every image and mask to ``shape``."""

    def fix(a):
        if a is None:
            return None
        for k, size in enumerate(shape):
            a = _crop_or_pad_axis(a, size, a.ndim - 2 + k)
        return a

    return replace(case, images=fix(case.images), mask=fix(case.mask), roi=fix(case.roi),
                   lung_masks=fix(case.lung_masks))
