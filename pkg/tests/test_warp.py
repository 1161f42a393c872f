import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import offset_field, smooth_field
from jointivim.errors import InvalidArgumentError, ShapeMismatchError
from jointivim.warp import (compose, control_shape, displacement_magnitude, expand_velocities,
                            integrate_svf, spatial_gradient, warp_image, warp_mask_nearest)

H = W = 24
INTERIOR = (slice(4, -4), slice(4, -4))


def const_field(dx, dy, shape=(H, W)):
    phi = np.zeros((2, *shape))
    phi[0], phi[1] = dx, dy
    return phi


def test_zero_velocity_is_exact_identity():
    assert np.array_equal(integrate_svf(np.zeros((2, H, W))), np.zeros((2, H, W)))


@given(arrays(np.float64, (3, 7, 9), elements=st.floats(-1e3, 1e3)))
def test_identity_warp_bitwise(img):
    assert np.array_equal(warp_image(img, np.zeros((2, 7, 9))), img)


def test_integer_translation_shifts_columns():
    img = np.arange(H * W, dtype=float).reshape(H, W)
    out = warp_image(img, const_field(3, 0))
    assert np.array_equal(out[:, : W - 3], img[:, 3:])


def test_half_pixel_shift_on_ramp():
    img = np.tile(np.arange(W, dtype=float) * 2.0, (H, 1))
    out = warp_image(img, const_field(0.5, 0))
    np.testing.assert_allclose(out[:, :-1], img[:, :-1] + 1.0, rtol=0, atol=1e-12)


def test_border_clamping():
    img = np.tile(np.arange(W, dtype=float), (H, 1))
    out = warp_image(img, const_field(100, 0))
    assert np.all(out == W - 1)


def test_constant_velocity_is_translation():
    phi = integrate_svf(const_field(2, 0))
    np.testing.assert_allclose(phi[0][INTERIOR], 2.0, atol=1e-3)
    np.testing.assert_allclose(phi[1][INTERIOR], 0.0, atol=1e-3)


def test_inverse_consistency(rng):
    for _ in range(5):
        v = smooth_field(rng, (32, 32), max_px=2.0, sigma=4.0)
        err = displacement_magnitude(compose(integrate_svf(v), integrate_svf(-v)))
        assert err[2:-2, 2:-2].max() < 0.05


def test_semigroup_property(rng):
    v = smooth_field(rng, (32, 32), max_px=2.0, sigma=4.0)
    half = integrate_svf(v / 2)
    err = displacement_magnitude(compose(half, half) - integrate_svf(v))
    assert err[2:-2, 2:-2].max() < 0.05


def test_compose_identity_and_translations(rng):
    b = smooth_field(rng, (H, W), max_px=1.5)
    np.testing.assert_allclose(compose(np.zeros_like(b), b), b, atol=1e-12)
    s = compose(const_field(1.5, -0.5), const_field(0.25, 2.0))
    np.testing.assert_allclose(s[0][INTERIOR], 1.75, atol=1e-12)
    np.testing.assert_allclose(s[1][INTERIOR], 1.5, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeMismatchError):
        warp_image(np.zeros((4, 5)), np.zeros((2, 5, 4)))
    with pytest.raises(ShapeMismatchError):
        compose(np.zeros((2, 4, 4)), np.zeros((2, 5, 5)))
    with pytest.raises(InvalidArgumentError):
        integrate_svf(np.zeros((2, 4, 4)), steps=0)


def test_spatial_gradient_examples(rng):
    const = np.full((2, 6, 7), 3.0)
    gx, gy = spatial_gradient(const)
    assert np.all(gx == 0) and np.all(gy == 0)
    ramp = np.tile(np.arange(7, dtype=float), (6, 1))
    gx, gy = spatial_gradient(ramp)
    assert np.all(gx[:, :-1] == 1) and np.all(gx[:, -1] == 0) and np.all(gy == 0)
    a, b = rng.normal(size=(2, 2, 6, 7))
    for ga, gb, gs in zip(spatial_gradient(a), spatial_gradient(b), spatial_gradient(a + b)):
        np.testing.assert_allclose(ga + gb, gs, atol=1e-12)


def test_warp_gradient_wrt_phi_matches_fd(rng):
    # sign-definite sub-pixel displacements keep every sample inside one
    # bilinear cell, where the warp is smooth and central differences are valid
    img = torch.as_tensor(smooth_field(rng, (12, 12), max_px=1.0, sigma=1.5)[0])
    phi = torch.as_tensor(offset_field(rng, (12, 12), 1, low=0.1, high=0.35, wiggle=0.08)[0])
    target = torch.as_tensor(rng.normal(size=(12, 12)))
    loss = lambda p: ((warp_image(img, p) - target) ** 2).sum()
    p = phi.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss(p), p)
    fd = torch.zeros_like(phi)
    h = 1e-4
    with torch.no_grad():
        for idx in np.ndindex(*phi.shape):
            e = torch.zeros_like(phi)
            e[idx] = h
            fd[idx] = (loss(phi + e) - loss(phi - e)) / (2 * h)
    assert float(torch.linalg.norm(g - fd) / torch.linalg.norm(fd)) < 1e-4


def test_gradient_flows_to_image():
    img = torch.rand(8, 8, dtype=torch.float64, requires_grad=True)
    out = warp_image(img, torch.full((2, 8, 8), 0.3, dtype=torch.float64))
    (g,) = torch.autograd.grad(out.sum(), img)
    assert torch.isclose(g.sum(), torch.tensor(64.0, dtype=torch.float64))


def test_batched_warp_matches_loop(rng):
    img = rng.random((3, 10, 10))
    phi = np.stack([smooth_field(rng, (10, 10), max_px=2) for _ in range(3)])
    batched = warp_image(img, phi)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], warp_image(img[i], phi[i]))


def test_mask_warp_stays_binary(rng):
    mask = np.zeros((16, 16))
    mask[4:10, 5:12] = 1
    out = warp_mask_nearest(mask, smooth_field(rng, (16, 16), max_px=2))
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert np.array_equal(warp_mask_nearest(mask, np.zeros((2, 16, 16))), mask)


def test_control_grid_expansion():
    assert control_shape((96, 96), 8) == (13, 13)
    assert control_shape((17, 9), None) == (17, 9)
    ctrl = torch.full((3, 2, 5, 4), 0.7, dtype=torch.float64)
    dense = expand_velocities(ctrl, (33, 25), 8)
    assert dense.shape == (3, 2, 33, 25)
    torch.testing.assert_close(dense, torch.full_like(dense, 0.7))


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_constant_field_flow_property(dx, dy):
    phi = integrate_svf(const_field(dx, dy, (20, 20)))
    inner = (slice(5, -5), slice(5, -5))
    assert np.abs(phi[0][inner] - dx).max() < 1e-3
    assert np.abs(phi[1][inner] - dy).max() < 1e-3
