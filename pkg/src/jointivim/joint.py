"""Joint estimation of bounded IVIM maps and per-image velocity fields.

The composite loss is minimized directly over latent parameter maps (passed
through the sigmoid bound transform) and one stationary velocity field per
b > 0 image; the b=0 image defines the reference frame.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .case import DwiCase
from .classical import DEFAULT_B_THRESHOLD, fit_map
from .errors import InvalidArgumentError, NonFiniteLossError
from .losses import LossBreakdown, LossConfig, latent_objective
from .model import DEFAULT_BOUNDS, IvimMaps, ParamBounds, latents_from_maps, maps_from_latents
from .warp import DEFAULT_SQUARING_STEPS, control_shape, expand_velocities, integrate_svf

log = logging.getLogger(__name__)

INIT_MODES = ("classical-fit", "mid-bounds")


@dataclass(frozen=True)
class OptConfig:
    """Optimizer settings.

    ``lr`` is the base Adam step; the latent maps and the velocity fields
    each get it multiplied by their own scale, because both are optimized
    directly rather than through network weights.

    ``velocity_spacing`` parameterizes each velocity field by a control grid
    with that node spacing (pixels), upsampled bicubically; ``None`` gives
    free per-pixel fields, which can trade registration accuracy for
    shuffling noisy pixels into agreement with the model.
    ``init_latent_clip`` bounds the initial latents so that starts taken from
    bound-clamped classical fits keep a usable sigmoid slope.
    """

    lr: float = 1e-3
    max_iter: int = 500
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-5
    improvement_tol: float = 1e-6
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    init: str = "classical-fit"
    map_lr_scale: float = 20.0
    velocity_lr_scale: float = 100.0
    squaring_steps: int = DEFAULT_SQUARING_STEPS
    grad_smoothing_sigma: Optional[float] = None
    velocity_smoothing_sigma: Optional[float] = None
    velocity_spacing: Optional[int] = 8
    b_threshold: float = DEFAULT_B_THRESHOLD
    init_latent_clip: float = 4.0

    def __post_init__(self):
        if not (self.lr > 0 and self.min_lr > 0 and self.map_lr_scale > 0 and self.velocity_lr_scale > 0):
            raise InvalidArgumentError("learning rates must be positive")
        if not 0 < self.factor < 1:
            raise InvalidArgumentError("plateau factor must lie in (0, 1)")
        if self.patience < 1 or self.max_iter < 1:
            raise InvalidArgumentError("patience and max_iter must be >= 1")
        if self.init not in INIT_MODES:
            raise InvalidArgumentError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    def to_dict(self):
        return asdict(self)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` steps
    without an improvement larger than ``tol`` over the best loss seen.

    ``exhausted`` turns true when a reduction is due while the rate already
    sits at ``min_lr``.
    """

    def __init__(self, lr, patience=10, factor=0.5, min_lr=1e-5, tol=1e-6, best=None):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.tol = tol
        self.best = np.inf if best is None else best
        self.num_bad = 0
        self.exhausted = False

    def step(self, loss: float) -> float:
        if loss < self.best - self.tol:
            self.best = loss
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad >= self.patience:
            self.num_bad = 0
            if self.lr <= self.min_lr:
                self.exhausted = True
            self.lr = max(self.lr * self.factor, self.min_lr)
        return self.lr


def scheduler_step(scheduler: PlateauScheduler, loss: float) -> float:
    return scheduler.step(loss)


@dataclass
class OptState:
    latents: torch.Tensor           # (3, H, W) in (D, f, Dstar) order
    velocities: torch.Tensor        # (N, 2, H, W); b=0 has no field
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @property
    def params(self):
        return [self.latents, self.velocities]

    @classmethod
    def zeros(cls, n_fields, shape, latents=None, velocity_shape=None):
        lat = torch.zeros((3, *shape), dtype=torch.float64) if latents is None else \
            torch.as_tensor(np.asarray(latents, dtype=np.float64)).clone()
        vel = torch.zeros((n_fields, 2, *(velocity_shape or shape)), dtype=torch.float64)
        return cls(lat, vel, [torch.zeros_like(lat), torch.zeros_like(vel)],
                   [torch.zeros_like(lat), torch.zeros_like(vel)])


@dataclass
class CaseResult:
    maps: IvimMaps
    velocities: np.ndarray
    deformations: np.ndarray
    corrected: np.ndarray
    trace: list
    final: LossBreakdown
    iterations: int
    config: OptConfig
    best_iteration: int = 0


def _value_and_grad(images, bvalues, state, loss_cfg, bounds, steps, spacing=None):
    lat = state.latents.detach().requires_grad_(True)
    vel = state.velocities.detach().requires_grad_(True)
    dense = expand_velocities(vel, images.shape[-2:], spacing)
    total, fit, smooth, sim, _ = latent_objective(images, bvalues, lat, dense, loss_cfg, bounds, steps)
    g_lat, g_vel = torch.autograd.grad(total, [lat, vel])
    terms = LossBreakdown(*(float(t.detach()) for t in (total, fit, smooth, sim)))
    return terms, g_lat, g_vel


def compute_gradients(case: DwiCase, state: OptState, loss_config: LossConfig = LossConfig(),
                      bounds: ParamBounds = DEFAULT_BOUNDS,
                      steps: int = DEFAULT_SQUARING_STEPS, spacing: Optional[int] = None) -> dict:
    """Exact gradients of the composite loss by reverse-mode differentiation.

    ``state.velocities`` are dense fields unless ``spacing`` names the
    control grid they live on.
    """
    images = torch.as_tensor(np.asarray(case.images, dtype=np.float64))
    terms, g_lat, g_vel = _value_and_grad(images, case.bvalues, state, loss_config, bounds, steps, spacing)
    return {"loss": terms, "latents": g_lat.numpy(), "velocities": g_vel.numpy()}


def _adam_update(state: OptState, grads, lrs, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    new = []
    for p, g, m, v, lr in zip(state.params, grads, state.m, state.v, lrs):
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        new.append(p - lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    state.latents, state.velocities = new


def _smooth_grad(g, sigma):
    arr = g.numpy()
    return torch.as_tensor(gaussian_filter(arr, sigma=(0,) * (arr.ndim - 2) + (sigma, sigma), mode="nearest"))


def initial_latents(case: DwiCase, config: OptConfig, bounds: ParamBounds = DEFAULT_BOUNDS,
                    init_maps: Optional[IvimMaps] = None) -> np.ndarray:
    if init_maps is None and config.init == "mid-bounds":
        return np.zeros((3, *case.shape))
    if init_maps is None:
        init_maps = fit_map(case, mask=np.ones(case.shape, bool), bounds=bounds,
                            b_threshold=config.b_threshold)
    # bound-clamped starts would sit where the sigmoid is flat
    return np.clip(latents_from_maps(init_maps), -config.init_latent_clip, config.init_latent_clip)


def optimize_case(case: DwiCase, config: OptConfig = OptConfig(),
                  bounds: ParamBounds = DEFAULT_BOUNDS, init_maps: Optional[IvimMaps] = None,
                  callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> CaseResult:
    """Minimize the composite loss of one (normalized) case.

    Latent maps start from the classical fit (or at mid-bounds), velocities
    at zero. Returns the best iterate seen, never the last one.
    """
    if case.n_images < 5:
        raise InvalidArgumentError("joint optimization needs at least 5 b-values")
    torch.manual_seed(config.seed)
    images = torch.as_tensor(np.asarray(case.images, dtype=np.float64))
    b = case.bvalues
    spacing = config.velocity_spacing
    state = OptState.zeros(case.n_images - 1, case.shape,
                           initial_latents(case, config, bounds, init_maps),
                           control_shape(case.shape, spacing))
    sched = PlateauScheduler(config.lr, config.patience, config.factor, config.min_lr,
                             config.improvement_tol)
    trace = []
    best_total, best_it = np.inf, 0
    best_lat, best_vel = state.latents.clone(), state.velocities.clone()

    for it in range(config.max_iter):
        terms, g_lat, g_vel = _value_and_grad(images, b, state, config.loss, bounds,
                                              config.squaring_steps, spacing)
        if not np.isfinite(terms.total) or not (torch.isfinite(g_lat).all() and torch.isfinite(g_vel).all()):
            raise NonFiniteLossError(it, f"non-finite loss or gradient at iteration {it} "
                                         f"(fit={terms.fit}, smooth={terms.smooth}, sim={terms.sim})")
        trace.append({"iteration": it, "lr": sched.lr, **terms.to_dict()})
        if callback is not None:
            callback(it, terms)
        if terms.total < best_total:
            best_total, best_it = terms.total, it
            best_lat, best_vel = state.latents.clone(), state.velocities.clone()
        lr = sched.step(terms.total)
        if sched.exhausted:
            log.debug("learning rate exhausted at iteration %d", it)
            break
        if config.grad_smoothing_sigma:
            g_lat = _smooth_grad(g_lat, config.grad_smoothing_sigma)
        if config.velocity_smoothing_sigma:
            g_vel = _smooth_grad(g_vel, config.velocity_smoothing_sigma)
        _adam_update(state, [g_lat, g_vel], [lr * config.map_lr_scale, lr * config.velocity_lr_scale])
        if not (torch.isfinite(state.latents).all() and torch.isfinite(state.velocities).all()):
            raise NonFiniteLossError(it + 1, f"parameters became non-finite after update {it}")

    with torch.no_grad():
        best_vel = expand_velocities(best_vel, case.shape, spacing)
        total, fit, smooth, sim, warped = latent_objective(images, b, best_lat, best_vel, config.loss,
                                                           bounds, config.squaring_steps)
        D, f, Dstar = maps_from_latents(best_lat, images[0], bounds)
        phi = integrate_svf(best_vel, config.squaring_steps)
    maps = IvimMaps(D=D.numpy(), Dstar=Dstar.numpy(), f=f.numpy(), S0=case.images[0].astype(np.float64),
                    bounds=bounds)
    final = LossBreakdown(float(total), float(fit), float(smooth), float(sim))
    return CaseResult(maps=maps, velocities=best_vel.numpy(), deformations=phi.numpy(),
                      corrected=warped.numpy(), trace=trace, final=final, iterations=len(trace),
                      config=config, best_iteration=best_it)
