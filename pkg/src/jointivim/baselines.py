"""Registration-based comparison methods.

Each correction returns a motion-corrected stack ready for pixelwise
SLS-TRF fitting. Registrations minimize local NCC (plus a smoothness penalty
for deformable ones) with L-BFGS on torch gradients.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import minimize

from .case import DwiCase
from .classical import DEFAULT_B_THRESHOLD, fit_map
from .errors import ConfigError, InvalidArgumentError, ShapeMismatchError
from .losses import local_ncc, smooth_loss, wser_loss
from .model import DEFAULT_BOUNDS, IvimMaps, ParamBounds, reconstruct_series
from .warp import DEFAULT_SQUARING_STEPS, control_shape, expand_velocities, integrate_svf, warp_image

log = logging.getLogger(__name__)

B0_MODES = ("affine", "deformable")


@dataclass(frozen=True)
class RegistrationSettings:
    lam: float = 0.015
    ncc_window: int = 9
    spacing: Optional[int] = 8
    affine_levels: int = 3
    max_iter: int = 200
    squaring_steps: int = DEFAULT_SQUARING_STEPS
    rounds: int = 3
    b_threshold: float = DEFAULT_B_THRESHOLD


@dataclass
class AffineTransform:
    """Pull-back affine map ``x -> A (x - c) + c + t`` in (x, y) pixel coords,
    ``c`` being the image centre."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    converged: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.translation))):
            raise InvalidArgumentError("affine transform must be finite")
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise InvalidArgumentError("affine matrix is singular")

    @property
    def angle_deg(self) -> float:
        return float(np.degrees(np.arctan2(self.matrix[1, 0], self.matrix[0, 0])))

    @classmethod
    def rotation(cls, degrees, translation=(0.0, 0.0)):
        a = np.radians(degrees)
        return cls(np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]), translation)

    def displacement(self, shape) -> np.ndarray:
        return _affine_field(torch.as_tensor(self.matrix), torch.as_tensor(self.translation),
                             *_centred_coords(shape, 1)).numpy()

    def inverse(self) -> "AffineTransform":
        Ai = np.linalg.inv(self.matrix)
        return AffineTransform(Ai, -Ai @ self.translation)


def _centred_coords(shape, factor):
    """Fine-grid coords (relative to the fine centre) of a level's pixel centres."""
    H, W = shape
    Hl, Wl = -(-H // factor), -(-W // factor)
    xs = torch.arange(Wl, dtype=torch.float64) * factor + (factor - 1) / 2 - (W - 1) / 2
    ys = torch.arange(Hl, dtype=torch.float64) * factor + (factor - 1) / 2 - (H - 1) / 2
    return xs.view(1, Wl).expand(Hl, Wl), ys.view(Hl, 1).expand(Hl, Wl)


def _affine_field(A, t, xs, ys):
    dx = (A[0, 0] - 1) * xs + A[0, 1] * ys + t[0]
    dy = A[1, 0] * xs + (A[1, 1] - 1) * ys + t[1]
    return torch.stack([dx, dy])


def _downsample(img, factor):
    if factor == 1:
        return img
    return F.avg_pool2d(img[None, None], factor, ceil_mode=True)[0, 0]


def _inside(phi):
    # soft fraction of each sample that lands inside the image (1 px ramp)
    H, W = phi.shape[-2:]
    ys = torch.arange(H, dtype=phi.dtype).view(H, 1)
    xs = torch.arange(W, dtype=phi.dtype).view(1, W)
    px, py = xs + phi[0], ys + phi[1]
    ramp = lambda t, n: torch.clamp(t + 0.5, 0, 1) * torch.clamp(n - 0.5 - t, 0, 1)
    return ramp(px, W) * ramp(py, H)


def _ncc(fixed, warped, window, phi=None):
    """``1 - NCC`` averaged over windows, weighted by how much of each window
    was sampled inside the moving image. Border clamping replicates edge
    pixels, which otherwise biases large shifts."""
    m = local_ncc(fixed, warped, window)
    if phi is None:
        return 1.0 - m.mean()
    w = F.avg_pool2d(_inside(phi)[None, None], window, stride=1, padding=window // 2,
                     count_include_pad=False)[0, 0]
    return 1.0 - (w * m).sum() / torch.clamp(w.sum(), min=1e-12)


def _lbfgs(fun, starts, max_iter):
    """L-BFGS from the best of ``starts``; returns the best point evaluated.

    Exact alignment sits on an interpolation kink where line searches stall,
    so the best evaluation rather than the final iterate is kept.
    """
    best = {"f": np.inf, "x": None}

    def f(x):
        p = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        val = fun(p)
        (g,) = torch.autograd.grad(val, p)
        fv = float(val.detach())
        if fv < best["f"]:
            best.update(f=fv, x=np.array(x, dtype=np.float64))
        return fv, g.numpy().astype(np.float64)

    for x in starts:
        f(x)
    res = minimize(f, best["x"], jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-9})
    return best["x"], bool(res.success), best["f"]


def _pair(fixed, moving):
    f = np.asarray(fixed, dtype=np.float64)
    m = np.asarray(moving, dtype=np.float64)
    if f.shape != m.shape or f.ndim != 2:
        raise ShapeMismatchError(f"fixed {f.shape} and moving {m.shape} must be equal 2D shapes")
    return torch.as_tensor(f), torch.as_tensor(m)


def register_affine(fixed, moving, settings: RegistrationSettings = RegistrationSettings()):
    """Six-parameter affine alignment of ``moving`` onto ``fixed``.

    Coarse-to-fine over up to ``affine_levels`` pyramid levels (factor 2,
    coarsest level kept >= 16 px). Returns ``(transform, warped)``.
    """
    F0, M0 = _pair(fixed, moving)
    shape = F0.shape
    scale = max(shape) / 2.0        # linear entries scaled to ~pixel units at the border
    p = np.zeros(6)
    converged = True
    levels = [2 ** k for k in reversed(range(settings.affine_levels)) if min(shape) / 2 ** k >= 16] or [1]
    for factor in levels:
        Fl, Ml = _downsample(F0, factor), _downsample(M0, factor)
        xs, ys = _centred_coords(shape, factor)

        def objective(q):
            A = torch.eye(2, dtype=torch.float64) + q[:4].view(2, 2) / scale
            phi = _affine_field(A, q[4:], xs, ys) / factor
            return _ncc(Fl, warp_image(Ml, phi), settings.ncc_window, phi)

        p, converged, _ = _lbfgs(objective, [p, np.zeros(6)] if p.any() else [p], settings.max_iter)
    T = AffineTransform(np.eye(2) + p[:4].reshape(2, 2) / scale, p[4:], converged)
    return T, warp_image(np.asarray(moving, dtype=np.float64), T.displacement(shape))


def register_deformable(fixed, moving, settings: RegistrationSettings = RegistrationSettings()):
    """Stationary-velocity registration minimizing ``1 - NCC + lam * smooth``.

    The velocity lives on a control grid (``settings.spacing``) and is refined
    coarse-to-fine from twice that spacing. Returns ``(velocity, warped)``.
    """
    F0, M0 = _pair(fixed, moving)
    shape = tuple(F0.shape)
    spacings = [settings.spacing] if settings.spacing is None else [2 * settings.spacing, settings.spacing]
    ctrl = None
    for sp in spacings:
        cs = control_shape(shape, sp)
        if ctrl is None:
            x0 = np.zeros((2, *cs))
        else:
            x0 = F.interpolate(torch.as_tensor(ctrl)[None], size=cs, mode="bilinear",
                               align_corners=True)[0].numpy()

        def objective(q, cs=cs, sp=sp):
            v = expand_velocities(q.view(2, *cs), shape, sp)
            phi = integrate_svf(v, settings.squaring_steps)
            warped = warp_image(M0, phi)
            return _ncc(F0, warped, settings.ncc_window, phi) + settings.lam * smooth_loss(v[None])

        starts = [x0.ravel(), np.zeros(x0.size)] if x0.any() else [x0.ravel()]
        x, ok, _ = _lbfgs(objective, starts, settings.max_iter)
        ctrl = x.reshape(2, *cs)
    with torch.no_grad():
        v = expand_velocities(torch.as_tensor(ctrl), shape, spacings[-1]).numpy()
    return v, warp_image(np.asarray(moving, dtype=np.float64), integrate_svf(v, settings.squaring_steps))


@dataclass
class Correction:
    """A corrected case plus the per-image deformations (b > 0) that made it."""

    case: DwiCase
    deformations: np.ndarray
    maps: Optional[IvimMaps] = None
    fit_terms: list = field(default_factory=list)
    transforms: list = field(default_factory=list)


def _require_moving(case):
    if case.n_images < 2:
        raise InvalidArgumentError("need at least one b > 0 image to correct")


def correct_to_b0(case: DwiCase, mode: str = "deformable",
                  settings: RegistrationSettings = RegistrationSettings(),
                  threads: int = 1) -> Correction:
    """Register every b > 0 image independently to the b=0 image."""
    if mode not in B0_MODES:
        raise ConfigError(f"unknown registration mode {mode!r}; expected one of {B0_MODES}")
    _require_moving(case)

    def one(i):
        if mode == "affine":
            T, warped = register_affine(case.images[0], case.images[i], settings)
            return T, T.displacement(case.shape), warped
        v, warped = register_deformable(case.images[0], case.images[i], settings)
        return v, integrate_svf(v, settings.squaring_steps), warped

    idx = range(1, case.n_images)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, idx))
    else:
        out = [one(i) for i in idx]
    images = case.images.astype(np.float64).copy()
    images[1:] = np.stack([o[2] for o in out])
    return Correction(case.with_images(images), np.stack([o[1] for o in out]),
                      transforms=[o[0] for o in out])


def correct_sequential(case: DwiCase, settings: RegistrationSettings = RegistrationSettings()) -> Correction:
    """Register S(b_i) to the already corrected S(b_{i-1}), in schedule order."""
    _require_moving(case)
    images = case.images.astype(np.float64).copy()
    phis = []
    for i in range(1, case.n_images):
        v, images[i] = register_deformable(images[i - 1], case.images[i], settings)
        phis.append(integrate_svf(v, settings.squaring_steps))
    return Correction(case.with_images(images), np.stack(phis))


def fit_term(stack, maps: IvimMaps, bvalues, p: int = 3) -> float:
    """Normalized WSER between a stack and the model images of ``maps``."""
    return float(wser_loss(np.asarray(stack, dtype=np.float64), reconstruct_series(maps, bvalues),
                           bvalues, p))


def iterative_fit_register(case: DwiCase, rounds: Optional[int] = None,
                           settings: RegistrationSettings = RegistrationSettings(),
                           bounds: ParamBounds = DEFAULT_BOUNDS) -> Correction:
    """Alternate pixelwise fitting and registration of each original image to
    its model image. ``fit_terms[k]`` is the fit term after round k+1."""
    rounds = settings.rounds if rounds is None else rounds
    if rounds < 1:
        raise InvalidArgumentError("rounds must be >= 1")
    _require_moving(case)
    current = case
    maps = fit_map(case, bounds=bounds, b_threshold=settings.b_threshold)
    phis = np.zeros((case.n_images - 1, 2, *case.shape))
    terms = []
    for r in range(rounds):
        recon = reconstruct_series(maps, case.bvalues)
        images = case.images.astype(np.float64).copy()
        for i in range(1, case.n_images):
            v, images[i] = register_deformable(recon[i], case.images[i], settings)
            phis[i - 1] = integrate_svf(v, settings.squaring_steps)
        current = case.with_images(images)
        maps = fit_map(current, bounds=bounds, b_threshold=settings.b_threshold)
        terms.append(fit_term(images, maps, case.bvalues))
        log.debug("iterative round %d fit term %.6g", r + 1, terms[-1])
    return Correction(current, phis, maps=maps, fit_terms=terms)
