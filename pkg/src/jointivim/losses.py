"""Fit, smoothness and similarity losses and their weighted combination.

Stacks are (..., n_b, H, W) and velocity fields (..., N, 2, H, W); any
leading batch dimensions are carried through, each reduction runs over the
trailing axes only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateInputError, InvalidArgumentError
from .model import DEFAULT_BOUNDS, ParamBounds, maps_from_latents, signal_model
from .warp import DEFAULT_SQUARING_STEPS, _tensor_io, integrate_svf, spatial_gradient, warp_image

NCC_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 0.5
    alpha2: float = 0.015
    alpha3: float = 0.8
    ncc_window: int = 9
    wser_p: int = 3

    def __post_init__(self):
        alphas = (self.alpha1, self.alpha2, self.alpha3)
        if any(a < 0 for a in alphas) or not any(a > 0 for a in alphas):
            raise InvalidArgumentError(f"loss weights must be >= 0 with one > 0, got {alphas}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise InvalidArgumentError("ncc_window must be odd and >= 3")
        if self.wser_p < 0:
            raise InvalidArgumentError("wser_p must be non-negative")

    def to_dict(self):
        return asdict(self)


# Weights selected by the two tuning groups of the original study.
GROUP1 = LossConfig(alpha1=10.0, alpha2=0.015, alpha3=0.1)
GROUP2 = LossConfig(alpha1=0.5, alpha2=0.015, alpha3=0.8)


@dataclass
class LossBreakdown:
    total: float
    fit: float
    smooth: float
    sim: float

    def to_dict(self):
        return asdict(self)


def bvalue_weights(bvalues):
    b = torch.as_tensor(bvalues, dtype=torch.float64)
    return torch.log(b + 1.0) + 1.0


def _safe_sqrt(x):
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def wser_map(warped, recon, bvalues, p: int = 3):
    """Per-pixel weighted standard error of the regression, unnormalized."""
    n = warped.shape[-3]
    if n <= p + 1:
        raise InvalidArgumentError(f"{n} observations leave no degrees of freedom for p={p}")
    w = bvalue_weights(bvalues).to(warped.dtype).view(-1, 1, 1)
    num = torch.sum(w * (warped - recon) ** 2, dim=-3) / torch.sum(w)
    return _safe_sqrt(num / (n - p - 1))


@_tensor_io
def wser_loss(warped, recon, bvalues, p: int = 3, normalize: bool = True):
    """Spatial mean of the per-pixel WSER, divided by the mean warped intensity."""
    if warped.shape != recon.shape:
        raise InvalidArgumentError(f"stack shapes differ: {tuple(warped.shape)} vs {tuple(recon.shape)}")
    val = wser_map(warped, recon, bvalues, p).mean(dim=(-2, -1))
    if not normalize:
        return val
    mean = warped.mean(dim=(-3, -2, -1))
    if torch.any(mean == 0):
        raise DegenerateInputError("mean intensity of the motion-compensated stack is zero")
    return val / mean


@_tensor_io
def smooth_loss(velocities):
    """Mean squared velocity gradient: sum over axes and components, averaged
    over the N fields and over the pixels where a forward difference exists."""
    if velocities.ndim == 3:
        velocities = velocities.unsqueeze(0)
    H, W = velocities.shape[-2:]
    gx, gy = spatial_gradient(velocities)
    total = torch.zeros(velocities.shape[:-4], dtype=velocities.dtype)
    if W > 1:
        total = total + (gx ** 2).sum(dim=(-4, -3, -2, -1)) / (H * (W - 1))
    if H > 1:
        total = total + (gy ** 2).sum(dim=(-4, -3, -2, -1)) / ((H - 1) * W)
    return total / velocities.shape[-4]


def _box_sum_axis(x, window, dim):
    r = window // 2
    pad = [0, 0] * (x.ndim - 1 - (dim % x.ndim)) + [r + 1, r]
    c = torch.cumsum(F.pad(x, pad), dim=dim)
    n = x.shape[dim]
    return c.narrow(dim, window, n) - c.narrow(dim, 0, n)


def _box_sum(x, window):
    """Sum over a centred window, zero outside the grid."""
    return _box_sum_axis(_box_sum_axis(x, window, -1), window, -2)


def local_ncc(fixed, moving, window: int = 9):
    """Windowed normalized cross-correlation map in [-1, 1].

    ``(cross + eps) / (sqrt(var_f * var_m) + eps)``: identical windows score
    exactly 1 and flat windows score a constant instead of dividing by zero.
    Windows are truncated at the border.
    """
    fixed, moving = torch.broadcast_tensors(fixed, moving)
    n = _box_sum(torch.ones_like(fixed), window)
    si, sj = _box_sum(fixed, window), _box_sum(moving, window)
    cross = _box_sum(fixed * moving, window) - si * sj / n
    var_i = _box_sum(fixed * fixed, window) - si * si / n
    var_j = _box_sum(moving * moving, window) - sj * sj / n
    den = _safe_sqrt(torch.clamp(var_i * var_j, min=0.0)) + NCC_EPS
    return (cross + NCC_EPS) / den


@_tensor_io
def ncc_loss(fixed, warped, window: int = 9):
    """``1 - mean NCC`` between ``fixed`` (..., H, W) and each of ``warped`` (..., N, H, W)."""
    if warped.ndim == fixed.ndim:
        warped = warped.unsqueeze(-3)
    ncc = local_ncc(fixed.unsqueeze(-3), warped, window)
    return 1.0 - ncc.mean(dim=(-3, -2, -1))


def composite_terms(images, bvalues, D, f, Dstar, velocities, config: LossConfig,
                    steps: int = DEFAULT_SQUARING_STEPS):
    """Torch evaluation of (total, fit, smooth, sim) and the warped stack.

    ``images`` is the observed (n_b, H, W) stack, whose b=0 plane doubles as
    the S0 map and as the reference frame; ``velocities`` holds one field per
    image with b > 0.
    """
    b = torch.as_tensor(bvalues, dtype=images.dtype)
    s0 = images[0]
    phi = integrate_svf(velocities, steps)
    moved = warp_image(images[1:], phi)
    s0b = s0.expand(*moved.shape[:-3], 1, *s0.shape)
    warped = torch.cat([s0b, moved], dim=-3)
    recon = signal_model(b.view(-1, 1, 1), s0, f.unsqueeze(-3), D.unsqueeze(-3), Dstar.unsqueeze(-3))
    fit = wser_loss(warped, recon, b, config.wser_p)
    smooth = smooth_loss(velocities)
    sim = ncc_loss(s0, moved, config.ncc_window)
    total = config.alpha1 * fit + config.alpha2 * smooth + config.alpha3 * sim
    return total, fit, smooth, sim, warped


def latent_objective(images, bvalues, latents, velocities, config: LossConfig,
                     bounds: ParamBounds = DEFAULT_BOUNDS, steps: int = DEFAULT_SQUARING_STEPS):
    """Composite loss as a function of latent maps (..., 3, H, W) and velocities."""
    D, f, Dstar = maps_from_latents(latents, images[0], bounds)
    return composite_terms(images, bvalues, D, f, Dstar, velocities, config, steps)


def composite_loss(case, maps, velocities, config: LossConfig = LossConfig(),
                   steps: int = DEFAULT_SQUARING_STEPS) -> LossBreakdown:
    """Evaluate the weighted loss of a case for given maps and velocity fields."""
    images = torch.as_tensor(np.asarray(case.images, dtype=np.float64))
    v = torch.as_tensor(np.asarray(velocities, dtype=np.float64))
    if v.shape != (case.n_images - 1, 2, *case.shape):
        raise InvalidArgumentError(
            f"need {case.n_images - 1} velocity fields of shape (2, {case.shape}), got {tuple(v.shape)}")
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    with torch.no_grad():
        total, fit, smooth, sim, _ = composite_terms(images, case.bvalues, t(maps.D), t(maps.f),
                                                     t(maps.Dstar), v, config, steps)
    return LossBreakdown(total=float(total), fit=float(fit), smooth=float(smooth), sim=float(sim))
