"""Shared oracles and builders for the test suite."""
from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from jointivim.case import DwiCase
from jointivim.losses import LossConfig, latent_objective
from jointivim.model import DEFAULT_BVALUES, DEFAULT_BOUNDS, BValueSchedule


def random_case(rng, shape=(16, 16), bvalues=DEFAULT_BVALUES):
    images = rng.uniform(0.2, 1.0, size=(len(bvalues), *shape))
    images = gaussian_filter(images, sigma=(0, 1, 1)) + 0.05 * rng.random((len(bvalues), *shape))
    return DwiCase(images, BValueSchedule(tuple(bvalues)))


def smooth_field(rng, shape, n=None, max_px=1.0, sigma=2.0):
    lead = () if n is None else (n,)
    v = gaussian_filter(rng.standard_normal((*lead, 2, *shape)), sigma=(0,) * (len(lead) + 1) + (sigma, sigma))
    return v * (max_px / np.abs(v).max())


def fd_gradient(images, bvalues, latents, velocities, config=LossConfig(), bounds=DEFAULT_BOUNDS,
                h=1e-4, chunk=512):
    """Central differences of the composite loss for every latent and velocity entry.

    Perturbations are evaluated as one batch dimension, ``chunk`` at a time.
    """
    images = torch.as_tensor(images, dtype=torch.float64)
    lat = torch.as_tensor(latents, dtype=torch.float64)
    vel = torch.as_tensor(velocities, dtype=torch.float64)
    n_lat = lat.numel()
    theta = torch.cat([lat.ravel(), vel.ravel()])
    n = theta.numel()
    out = np.empty(n)
    with torch.no_grad():
        for start in range(0, n, chunk):
            idx = torch.arange(start, min(start + chunk, n))
            k = idx.numel()
            batch = theta.expand(2 * k, n).clone()
            rows = torch.arange(2 * k)
            batch[rows, torch.cat([idx, idx])] += torch.cat([torch.full((k,), h), torch.full((k,), -h)])
            L = batch[:, :n_lat].reshape(2 * k, *lat.shape)
            V = batch[:, n_lat:].reshape(2 * k, *vel.shape)
            total = latent_objective(images, bvalues, L, V, config, bounds)[0]
            out[start:start + k] = ((total[:k] - total[k:]) / (2 * h)).numpy()
    return out[:n_lat].reshape(lat.shape), out[n_lat:].reshape(vel.shape)


def offset_field(rng, shape, n, low=0.5, high=1.5, wiggle=0.25, sigma=2.0):
    """Random smooth fields whose components keep one sign: a random offset
    of magnitude in [low, high] plus a smooth perturbation."""
    off = rng.uniform(low, high, size=(n, 2, 1, 1)) * rng.choice([-1.0, 1.0], size=(n, 2, 1, 1))
    return off + smooth_field(rng, shape, n, max_px=wiggle, sigma=sigma)
