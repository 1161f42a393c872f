"""Synthetic DWI slices with known IVIM maps, motion and Rician noise."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .case import DwiCase
from .errors import InvalidArgumentError
from .model import (DEFAULT_BOUNDS, DEFAULT_BVALUES, BValueSchedule, IvimMaps, IvimParams,
                    reconstruct_series)
from .warp import displacement_magnitude, integrate_svf, warp_image, warp_mask_nearest


@dataclass(frozen=True)
class Region:
    D: float
    f: float
    Dstar: float
    S0: float

    def params(self):
        return IvimParams(D=self.D, Dstar=self.Dstar, f=self.f, S0=self.S0)


@dataclass(frozen=True)
class PhantomSpec:
    """Layout: a body ellipse on a dark background, two lungs and a heart.

    The right lung is the ROI. ``f_gradient`` (lo, hi) replaces the ROI's f by
    a linear ramp along x. ``motion_px`` is the maximum displacement per
    b > 0 image, ``motion_sigma`` the spatial smoothness of the random
    velocities; ``snr=None`` disables noise. ``uniform=True`` fills the whole
    grid with the lung region. ``texture`` is the relative amplitude of a
    smooth random modulation of S0 (tissue heterogeneity, so that motion is
    observable inside regions); it never changes D, f or Dstar.
    """

    shape: tuple = (96, 96)
    bvalues: tuple = DEFAULT_BVALUES
    lung: Region = Region(D=0.0020, f=0.30, Dstar=0.060, S0=1.0)
    body: Region = Region(D=0.0015, f=0.15, Dstar=0.030, S0=0.45)
    heart: Region = Region(D=0.0025, f=0.45, Dstar=0.100, S0=0.80)
    background: Region = Region(D=0.0003, f=0.07, Dstar=0.006, S0=0.02)
    f_gradient: Optional[tuple] = None
    uniform: bool = False
    texture: float = 0.15
    texture_sigma: float = 2.0
    motion_px: float = 0.0
    motion_sigma: float = 12.0
    snr: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "bvalues", tuple(float(b) for b in self.bvalues))
        for name in ("lung", "body", "heart", "background"):
            r = getattr(self, name)
            if isinstance(r, dict):
                r = Region(**r)
                object.__setattr__(self, name, r)
            _check_region(name, r)
        if self.f_gradient is not None:
            lo, hi = self.f_gradient
            if not (DEFAULT_BOUNDS.f[0] <= min(lo, hi) and max(lo, hi) <= DEFAULT_BOUNDS.f[1]):
                raise InvalidArgumentError("f_gradient leaves the f bounds")
        if not 0 <= self.texture < 1 or self.texture_sigma <= 0:
            raise InvalidArgumentError("texture amplitude must lie in [0, 1) with positive smoothness")
        if self.motion_px < 0 or self.motion_sigma <= 0:
            raise InvalidArgumentError("motion magnitude must be >= 0 and smoothness > 0")
        if self.snr is not None and not self.snr > 0:
            raise InvalidArgumentError("snr must be positive (or None for no noise)")
        if min(self.shape) < 4:
            raise InvalidArgumentError("phantom grid must be at least 4x4")
        BValueSchedule(self.bvalues)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("shape", "bvalues", "f_gradient"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _check_region(name, r):
    b = DEFAULT_BOUNDS
    for p in ("D", "f", "Dstar"):
        lo, hi = getattr(b, p)
        if not lo <= getattr(r, p) <= hi:
            raise InvalidArgumentError(f"{name}.{p}={getattr(r, p)} outside bounds ({lo}, {hi})")
    if r.S0 < 0:
        raise InvalidArgumentError(f"{name}.S0 must be non-negative")


@dataclass
class GroundTruth:
    maps: IvimMaps
    velocities: np.ndarray
    deformations: np.ndarray
    roi: np.ndarray
    lung_masks: np.ndarray
    body: np.ndarray


def _ellipse(shape, cy, cx, ry, rx):
    y, x = np.mgrid[: shape[0], : shape[1]]
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def layout(spec: PhantomSpec):
    """Boolean region masks (body, right lung, left lung, heart)."""
    H, W = spec.shape
    if spec.uniform:
        full = np.ones(spec.shape, bool)
        empty = np.zeros(spec.shape, bool)
        return full, full, empty, empty
    body = _ellipse(spec.shape, (H - 1) / 2, (W - 1) / 2, 0.44 * H, 0.40 * W)
    rlung = _ellipse(spec.shape, 0.45 * H, 0.33 * W, 0.24 * H, 0.12 * W)
    llung = _ellipse(spec.shape, 0.45 * H, 0.69 * W, 0.22 * H, 0.10 * W)
    heart = _ellipse(spec.shape, 0.72 * H, 0.52 * W, 0.10 * H, 0.12 * W) & ~rlung & ~llung
    return body, rlung, llung, heart


def make_phantom(spec: PhantomSpec = PhantomSpec()):
    """Noiseless, motion-free case and its ground truth."""
    body, rlung, llung, heart = layout(spec)
    maps = {k: np.full(spec.shape, getattr(spec.background, k)) for k in ("D", "f", "Dstar", "S0")}
    for region, m in ((spec.body, body), (spec.lung, rlung | llung), (spec.heart, heart)):
        for k in maps:
            maps[k][m] = getattr(region, k)
    if spec.texture > 0 and not spec.uniform:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(3)[2])
        t = gaussian_filter(rng.standard_normal(spec.shape), spec.texture_sigma, mode="reflect")
        maps["S0"] = maps["S0"] * (1.0 + spec.texture * np.clip(t / t.std(), -3, 3) / 3)
    if spec.f_gradient is not None:
        ys, xs = np.nonzero(rlung)
        lo, hi = spec.f_gradient
        t = (xs - xs.min()) / max(xs.max() - xs.min(), 1)
        maps["f"][ys, xs] = lo + t * (hi - lo)
    truth = IvimMaps(D=maps["D"], Dstar=maps["Dstar"], f=maps["f"], S0=maps["S0"])
    images = reconstruct_series(truth, spec.bvalues)
    n = len(spec.bvalues)
    lung_masks = np.repeat(rlung[None], n, axis=0)
    case = DwiCase(images=images, schedule=BValueSchedule(spec.bvalues), roi=rlung,
                   lung_masks=lung_masks, case_id=f"phantom-{spec.seed}")
    gt = GroundTruth(maps=truth, velocities=np.zeros((n - 1, 2, *spec.shape)),
                     deformations=np.zeros((n - 1, 2, *spec.shape)), roi=rlung,
                     lung_masks=lung_masks, body=body)
    return case, gt


def random_velocity(shape, magnitude, sigma, rng, steps=7):
    """Gaussian-smoothed random SVF rescaled so its integrated deformation
    peaks at ``magnitude`` pixels."""
    noise = rng.standard_normal((2, *shape))
    v = np.stack([gaussian_filter(c, sigma, mode="reflect") for c in noise])
    v *= magnitude / displacement_magnitude(v).max()
    # flow displacement differs slightly from |v|; fixed-point rescale
    for _ in range(4):
        peak = displacement_magnitude(integrate_svf(v, steps)).max()
        v *= magnitude / peak
    return v


def _rngs(seed):
    motion, noise = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(motion), np.random.default_rng(noise)


def apply_motion(case: DwiCase, spec: PhantomSpec, rng=None):
    """Warp every b > 0 image by its own random smooth deformation.

    Returns the moved case (lung masks moved along) and the true velocities.
    """
    n = case.n_images
    velocities = np.zeros((n - 1, 2, *case.shape))
    if spec.motion_px == 0:
        return case, velocities
    rng = _rngs(spec.seed)[0] if rng is None else rng
    for i in range(n - 1):
        velocities[i] = random_velocity(case.shape, spec.motion_px, spec.motion_sigma, rng)
    phi = integrate_svf(velocities)
    images = case.images.copy()
    images[1:] = warp_image(case.images[1:], phi)
    lung = None
    if case.lung_masks is not None:
        lung = case.lung_masks.copy()
        lung[1:] = warp_mask_nearest(case.lung_masks[1:].astype(np.float64), phi) > 0.5
    return replace(case, images=images, lung_masks=lung), velocities


def add_rician_noise(case: DwiCase, snr: Optional[float], seed=None, rng=None) -> DwiCase:
    """Magnitude of complex Gaussian noise with sigma = mean(S(b0)) / snr."""
    if snr is None or np.isinf(snr):
        return case
    if not snr > 0:
        raise InvalidArgumentError("snr must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    sigma = case.images[0].mean() / snr
    n1 = rng.normal(0.0, sigma, case.images.shape)
    n2 = rng.normal(0.0, sigma, case.images.shape)
    return replace(case, images=np.sqrt((case.images + n1) ** 2 + n2 ** 2))


def simulate(spec: PhantomSpec = PhantomSpec()):
    """Phantom with motion and noise as configured; ground truth attached."""
    case, gt = make_phantom(spec)
    motion_rng, noise_rng = _rngs(spec.seed)
    moved, velocities = apply_motion(case, spec, rng=motion_rng)
    gt.velocities = velocities
    gt.deformations = integrate_svf(velocities)
    gt.lung_masks = moved.lung_masks
    noisy = add_rician_noise(moved, spec.snr, rng=noise_rng)
    return noisy, gt
