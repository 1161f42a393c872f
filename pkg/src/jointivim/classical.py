"""Voxelwise segmented least squares (SLS) plus bounded nonlinear refinement.

All solvers are vectorised over voxels; every arithmetic operation acts on a
single voxel's data, so a voxel's result does not depend on which other
voxels share the batch.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .case import DwiCase
from .errors import DegenerateInputError, InvalidArgumentError, ShapeMismatchError
from .model import DEFAULT_BOUNDS, IvimMaps, IvimParams, ParamBounds, signal_model

DEFAULT_B_THRESHOLD = 200.0
XTOL = 1e-10
FTOL = 1e-10
GTOL = 1e-14
MAX_ITER = 200
_DIAG = np.arange(3)


@dataclass
class FitResult:
    """Refinement outcome; fields are scalars for one voxel, arrays for a batch."""

    params: IvimParams
    residual_norm: np.ndarray | float
    converged: np.ndarray | bool
    iterations: np.ndarray | int


def _as_voxels(signals, bvalues):
    S = np.asarray(signals, dtype=np.float64)
    b = np.asarray(bvalues, dtype=np.float64)
    if S.shape[-1] != b.size:
        raise ShapeMismatchError(f"signals have {S.shape[-1]} samples for {b.size} b-values")
    return S, b


def _cost(S, b, s0, D, f, Dstar):
    r = signal_model(b, s0[..., None], f[..., None], D[..., None], Dstar[..., None]) - S
    return np.sum(r * r, axis=-1)


def _fit_dstar(S, b, s0, D, f, lo, hi, n_grid=48, n_golden=60):
    """1-D bounded least squares for Dstar with everything else fixed.

    Coarse log-spaced scan followed by golden-section refinement of the
    bracket around the best scan point.
    """
    grid = np.geomspace(lo, hi, n_grid)
    costs = np.stack([_cost(S, b, s0, D, f, np.full_like(D, g)) for g in grid], axis=-1)
    k = np.argmin(costs, axis=-1)
    grid_cost = np.min(costs, axis=-1)
    a = grid[np.maximum(k - 1, 0)]
    c = grid[np.minimum(k + 1, n_grid - 1)]
    r = (np.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = c - r * (c - a), a + r * (c - a)
    f1, f2 = _cost(S, b, s0, D, f, x1), _cost(S, b, s0, D, f, x2)
    for _ in range(n_golden):
        left = f1 < f2
        a = np.where(left, a, x1)
        c = np.where(left, x2, c)
        xn = np.where(left, c - r * (c - a), a + r * (c - a))
        fn = _cost(S, b, s0, D, f, xn)
        x1, x2, f1, f2 = (np.where(left, xn, x2), np.where(left, x1, xn),
                          np.where(left, fn, f2), np.where(left, f1, fn))
    best = np.where(f1 < f2, x1, x2)
    return np.where(grid_cost < np.minimum(f1, f2), grid[k], best)


def sls_init(signals, bvalues, bounds: ParamBounds = DEFAULT_BOUNDS,
             b_threshold: float = DEFAULT_B_THRESHOLD) -> IvimParams:
    """Segmented least-squares starting point.

    D and the intercept come from a log-linear fit over b >= ``b_threshold``
    (non-positive samples excluded), f from the intercept relative to the b=0
    signal, Dstar from a 1-D fit with D and f fixed. Voxels with fewer than
    two usable high-b samples start at mid-bounds. ``signals`` is (..., n_b)
    and the first sample must be the b=0 acquisition.
    """
    S, b = _as_voxels(signals, bvalues)
    if np.any(np.all(S == 0, axis=-1)):
        raise DegenerateInputError("all-zero signal vector")
    lo, hi = bounds.lower(), bounds.upper()
    mid = bounds.mid()
    s0 = S[..., 0]

    use = (b >= b_threshold) & (S > 0)
    w = use.astype(np.float64)
    n = w.sum(-1)
    y = np.log(np.where(use, S, 1.0))
    sb, sy = (w * b).sum(-1), (w * y).sum(-1)
    sbb, sby = (w * b * b).sum(-1), (w * b * y).sum(-1)
    denom = n * sbb - sb * sb
    ok = (n >= 2) & (denom > 0) & (s0 > 0)
    safe = np.where(ok, denom, 1.0)
    slope = (n * sby - sb * sy) / safe
    intercept = (sy - slope * sb) / np.where(ok, n, 1.0)

    D = np.where(ok, np.clip(-slope, lo[0], hi[0]), mid[0])
    A = np.exp(np.where(ok, intercept, 0.0))
    f = np.where(ok, np.clip(1.0 - A / np.where(ok, s0, 1.0), lo[1], hi[1]), mid[1])
    Dstar = _fit_dstar(S, b, s0, D, f, lo[2], hi[2])
    Dstar = np.where(ok, np.clip(Dstar, lo[2], hi[2]), mid[2])

    out = [D, f, Dstar]
    if np.ndim(D) == 0:
        out = [float(v) for v in out]
    return IvimParams(D=out[0], Dstar=out[2], f=out[1], S0=s0 if np.ndim(s0) else float(s0))


def _residual_jacobian(S, b, s0, theta, span):
    D, f, Dstar = theta[:, 0:1], theta[:, 1:2], theta[:, 2:3]
    E = np.exp(-b * D)
    G1 = np.expm1(-b * Dstar)
    model = s0[:, None] * E * (1.0 + f * G1)
    r = model - S
    J = np.empty(S.shape + (3,))
    J[..., 0] = -b * model
    J[..., 1] = s0[:, None] * E * G1
    J[..., 2] = -b * s0[:, None] * E * f * (G1 + 1.0)
    return r, J * span


def _bounded_lm(S, b, s0, z0, lo, hi, max_iter, xtol, ftol, gtol):
    """Box-constrained Levenberg-Marquardt in coordinates scaled to [0, 1]^3.

    Variables sitting on a bound with the gradient pointing outward are frozen
    for that step; trial points are projected onto the box and only accepted
    when they lower the cost, so the cost never increases.
    """
    V = S.shape[0]
    span = hi - lo
    z = z0.copy()
    r, J = _residual_jacobian(S, b, s0, lo + z * span, span)
    cost = 0.5 * np.sum(r * r, -1)
    lam = np.full(V, 1e-3)
    active = np.ones(V, bool)
    converged = np.zeros(V, bool)
    iters = np.zeros(V, np.int64)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        Si, s0i, zi, ci, li = S[idx], s0[idx], z[idx], cost[idx], lam[idx]
        r, J = _residual_jacobian(Si, b, s0i, lo + zi * span, span)
        g = np.einsum("vbk,vb->vk", J, r)
        H = np.einsum("vbk,vbl->vkl", J, J)
        free = ~(((zi <= 0.0) & (g > 0)) | ((zi >= 1.0) & (g < 0)))
        gfree = np.where(free, g, 0.0)
        stationary = np.max(np.abs(gfree), -1) <= gtol

        fm = free[:, :, None] & free[:, None, :]
        diag = np.einsum("vkk->vk", H)
        A = np.where(fm, H, 0.0)
        A[:, _DIAG, _DIAG] += np.where(free, li[:, None] * (diag + 1e-12), 1.0)
        step = np.linalg.solve(A, -gfree[..., None])[..., 0]
        znew = np.clip(zi + step, 0.0, 1.0)
        cnew = 0.5 * np.sum((signal_model(b, s0i[:, None], (lo[1] + znew[:, 1:2] * span[1]),
                                          (lo[0] + znew[:, 0:1] * span[0]),
                                          (lo[2] + znew[:, 2:3] * span[2])) - Si) ** 2, -1)
        accept = (cnew < ci) & ~stationary
        dz = np.max(np.abs(znew - zi), -1)
        small_step = accept & (dz <= xtol * (np.max(np.abs(zi), -1) + xtol))
        small_df = accept & ((ci - cnew) <= ftol * ci)

        z[idx] = np.where(accept[:, None], znew, zi)
        cost[idx] = np.where(accept, cnew, ci)
        lam[idx] = np.where(accept, np.maximum(li / 3.0, 1e-15), li * 4.0)
        stuck = ~accept & (li * 4.0 > 1e16)
        done = stationary | small_step | small_df | stuck
        converged[idx] = done
        active[idx] = ~done

    return z, np.sqrt(2.0 * cost), converged, iters


def trf_refine(signals, bvalues, init: IvimParams, bounds: ParamBounds = DEFAULT_BOUNDS,
               max_iter: int = MAX_ITER, xtol: float = XTOL, ftol: float = FTOL,
               gtol: float = GTOL) -> FitResult:
    """Bound-constrained nonlinear least squares on the IVIM model, S0 fixed.

    ``init.S0`` supplies the fixed baseline; by convention it is the observed
    b=0 signal. Hitting ``max_iter`` returns the best point with
    ``converged=False`` rather than raising.
    """
    S, b = _as_voxels(signals, bvalues)
    batch = S.shape[:-1]
    lo, hi = bounds.lower(), bounds.upper()
    theta0 = np.stack(np.broadcast_arrays(init.D, init.f, init.Dstar), -1).reshape(-1, 3)
    theta0 = np.broadcast_to(theta0, (int(np.prod(batch)), 3)) if theta0.shape[0] == 1 else theta0
    if np.any(theta0 < lo) or np.any(theta0 > hi):
        raise InvalidArgumentError("initial parameters must lie within bounds")
    s0 = np.broadcast_to(np.asarray(init.S0, dtype=np.float64), batch).reshape(-1)
    z0 = (theta0 - lo) / (hi - lo)
    z, res, conv, it = _bounded_lm(S.reshape(-1, b.size), b, s0, z0, lo, hi,
                                   max_iter, xtol, ftol, gtol)
    theta = np.clip(lo + z * (hi - lo), lo, hi)
    if not batch:
        return FitResult(IvimParams(D=float(theta[0, 0]), Dstar=float(theta[0, 2]),
                                    f=float(theta[0, 1]), S0=float(s0[0])),
                         float(res[0]), bool(conv[0]), int(it[0]))
    theta = theta.reshape(*batch, 3)
    return FitResult(IvimParams(D=theta[..., 0], Dstar=theta[..., 2], f=theta[..., 1],
                                S0=s0.reshape(batch)),
                     res.reshape(batch), conv.reshape(batch), it.reshape(batch))


def fit_voxels(signals, bvalues, bounds: ParamBounds = DEFAULT_BOUNDS,
               b_threshold: float = DEFAULT_B_THRESHOLD, **kw) -> FitResult:
    """SLS initialization followed by refinement for a (V, n_b) batch."""
    init = sls_init(signals, bvalues, bounds, b_threshold)
    return trf_refine(signals, bvalues, init, bounds, **kw)


def fit_map(case: DwiCase, mask: Optional[np.ndarray] = None,
            bounds: ParamBounds = DEFAULT_BOUNDS, b_threshold: float = DEFAULT_B_THRESHOLD,
            threads: int = 1, images: Optional[np.ndarray] = None) -> IvimMaps:
    """Pixelwise SLS-TRF maps of a case assumed to be spatially aligned.

    Pixels outside ``mask`` (or with an all-zero signal) are set to the lower
    bounds. ``images`` overrides the case stack, e.g. with a corrected one.
    Results do not depend on ``threads``.
    """
    stack = np.asarray(case.images if images is None else images, dtype=np.float64)
    shape = stack.shape[1:]
    if mask is None:
        mask = case.mask if case.mask is not None else np.ones(shape, bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} != image shape {shape}")
    vox = stack.reshape(stack.shape[0], -1).T
    sel = np.flatnonzero(mask.ravel() & np.any(vox != 0, axis=1))
    out = np.tile(bounds.lower(), (vox.shape[0], 1))
    b = case.bvalues

    def work(chunk):
        res = fit_voxels(vox[chunk], b, bounds, b_threshold)
        return chunk, np.stack([res.params.D, res.params.f, res.params.Dstar], -1)

    if sel.size:
        chunks = np.array_split(sel, max(1, min(threads, sel.size)))
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(work, chunks))
        else:
            results = [work(c) for c in chunks]
        for chunk, theta in results:
            out[chunk] = theta
    out = out.reshape(*shape, 3)
    return IvimMaps(D=out[..., 0], Dstar=out[..., 2], f=out[..., 1], S0=stack[0].copy(),
                    bounds=bounds)
