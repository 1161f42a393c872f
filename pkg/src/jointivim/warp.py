"""Dense 2D deformations on a pixel grid.

Vector fields are shaped (..., 2, H, W) with channel 0 the x (column)
component and channel 1 the y (row) component, in pixels. Displacements use
the pull-back convention: ``warp_image(img, phi)(x) = img(x + phi(x))``.
Samples outside the grid are clamped to the nearest edge pixel.

Functions accept numpy arrays or torch tensors; numpy inputs are computed in
float64 and returned as numpy, tensors stay tensors (and autograd works).
"""
from __future__ import annotations

import functools

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, ShapeMismatchError

DEFAULT_SQUARING_STEPS = 7


def _tensor_io(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        as_numpy = not any(torch.is_tensor(a) for a in args)
        args = [torch.as_tensor(np.asarray(a, dtype=np.float64)) if isinstance(a, (np.ndarray, list)) else a
                for a in args]
        out = fn(*args, **kwargs)
        if as_numpy:
            if isinstance(out, tuple):
                return tuple(o.detach().numpy() for o in out)
            return out.detach().numpy()
        return out
    return wrapper


def _grid(H, W, like):
    ys = torch.arange(H, dtype=like.dtype, device=like.device)
    xs = torch.arange(W, dtype=like.dtype, device=like.device)
    return ys.view(H, 1), xs.view(1, W)


def sample_bilinear(img, px, py):
    """Bilinear samples of ``img`` (..., C, H, W) at pixel coords (..., H', W').

    Leading batch dimensions broadcast. Coordinates are clamped to the grid.
    """
    H, W = img.shape[-2:]
    batch = torch.broadcast_shapes(img.shape[:-3], px.shape[:-2], py.shape[:-2])
    C = img.shape[-3]
    img = img.expand(*batch, C, H, W)
    px = px.expand(*batch, *px.shape[-2:]).clamp(0, W - 1)
    py = py.expand(*batch, *py.shape[-2:]).clamp(0, H - 1)
    # NaN coordinates index pixel 0; the NaN weights still poison the output
    x0 = torch.floor(torch.nan_to_num(px)).clamp(0, max(W - 2, 0))
    y0 = torch.floor(torch.nan_to_num(py)).clamp(0, max(H - 2, 0))
    wx = (px - x0).unsqueeze(-3)
    wy = (py - y0).unsqueeze(-3)
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)
    flat = img.reshape(*batch, C, H * W)
    out_shape = (*batch, C, *px.shape[-2:])

    def take(yi, xi):
        idx = (yi * W + xi).reshape(*batch, 1, -1).expand(*batch, C, -1)
        return torch.gather(flat, -1, idx).reshape(out_shape)

    top = (1 - wx) * take(y0i, x0i) + wx * take(y0i, x1i)
    bottom = (1 - wx) * take(y1i, x0i) + wx * take(y1i, x1i)
    return (1 - wy) * top + wy * bottom


def _check_field(phi, spatial):
    if phi.shape[-3] != 2 or tuple(phi.shape[-2:]) != tuple(spatial):
        raise ShapeMismatchError(f"field shape {tuple(phi.shape)} does not match image grid {tuple(spatial)}")


@_tensor_io
def warp_image(img, phi):
    """Resample ``img`` (..., H, W) at ``x + phi(x)``."""
    _check_field(phi, img.shape[-2:])
    H, W = img.shape[-2:]
    ys, xs = _grid(H, W, phi)
    out = sample_bilinear(img.unsqueeze(-3), xs + phi[..., 0, :, :], ys + phi[..., 1, :, :])
    return out.squeeze(-3)


def _compose(a, b):
    # grid_sample with border padding and align_corners=True is the same
    # clamp-to-edge bilinear rule as sample_bilinear, only faster
    H, W = b.shape[-2:]
    ys, xs = _grid(H, W, b)
    batch = torch.broadcast_shapes(a.shape[:-3], b.shape[:-3])
    a = a.expand(*batch, 2, H, W).reshape(-1, 2, H, W)
    b = b.expand(*batch, 2, H, W)
    gx = (xs + b[..., 0, :, :]) * (2.0 / max(W - 1, 1)) - 1.0
    gy = (ys + b[..., 1, :, :]) * (2.0 / max(H - 1, 1)) - 1.0
    # clamping matches border padding; grid_sample would swallow NaN and
    # crash on inf, so both are handled here
    grid = torch.stack([gx, gy], dim=-1).reshape(-1, H, W, 2).clamp(-1.0, 1.0)
    s = F.grid_sample(a, torch.nan_to_num(grid), mode="bilinear", padding_mode="border",
                      align_corners=True).reshape(*batch, 2, H, W)
    s = torch.where(torch.isnan(grid).any(-1).reshape(*batch, 1, H, W), torch.nan, s)
    return b + s


@_tensor_io
def compose(a, b):
    """Displacement of ``a o b``: ``b(x) + a(x + b(x))``."""
    if a.shape[-3:] != b.shape[-3:]:
        raise ShapeMismatchError(f"cannot compose fields of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    _check_field(b, b.shape[-2:])
    return _compose(a, b)


@_tensor_io
def integrate_svf(v, steps: int = DEFAULT_SQUARING_STEPS):
    """Exponential of a stationary velocity field by scaling and squaring."""
    if steps < 1:
        raise InvalidArgumentError("squaring steps must be >= 1")
    _check_field(v, v.shape[-2:])
    phi = v / (2 ** steps)
    for _ in range(steps):
        phi = _compose(phi, phi)
    return phi


@_tensor_io
def spatial_gradient(field):
    """Forward differences along x and y; the last column/row repeats (zero)."""
    gx = torch.diff(field, dim=-1, append=field[..., -1:])
    gy = torch.diff(field, dim=-2, append=field[..., -1:, :])
    return gx, gy


@_tensor_io
def warp_mask_nearest(mask, phi):
    """Nearest-neighbour resampling of a mask; output is boolean-valued float."""
    _check_field(phi, mask.shape[-2:])
    H, W = mask.shape[-2:]
    ys, xs = _grid(H, W, phi)
    px = torch.round(xs + phi[..., 0, :, :]).clamp(0, W - 1).long()
    py = torch.round(ys + phi[..., 1, :, :]).clamp(0, H - 1).long()
    batch = torch.broadcast_shapes(mask.shape[:-2], px.shape[:-2])
    flat = mask.expand(*batch, H, W).reshape(*batch, H * W)
    idx = (py * W + px).expand(*batch, H, W).reshape(*batch, H * W)
    return torch.gather(flat, -1, idx).reshape(*batch, H, W)


def displacement_magnitude(phi):
    phi = np.asarray(phi)
    return np.sqrt(phi[..., 0, :, :] ** 2 + phi[..., 1, :, :] ** 2)


def control_shape(shape, spacing):
    """Control-grid size whose nodes land on the first and last pixel."""
    if spacing is None:
        return tuple(shape)
    return tuple(int(np.ceil((n - 1) / spacing)) + 1 for n in shape)


def expand_velocities(params, shape, spacing):
    """Dense (..., 2, H, W) velocities from control-grid parameters (bicubic)."""
    if spacing is None:
        return params
    lead = params.shape[:-3]
    dense = F.interpolate(params.reshape(-1, *params.shape[-3:]), size=tuple(shape),
                          mode="bicubic", align_corners=True)
    return dense.reshape(*lead, 2, *shape)
