import dataclasses

import numpy as np
import pytest
import torch

from helpers import fd_gradient, offset_field, random_case
from jointivim.errors import InvalidArgumentError, NonFiniteLossError
from jointivim.joint import OptConfig, OptState, PlateauScheduler, compute_gradients, optimize_case
from jointivim.losses import GROUP1, LossConfig
from jointivim.model import DEFAULT_BOUNDS, latents_from_maps
from jointivim.phantom import PhantomSpec, make_phantom

SHORT = OptConfig(max_iter=60)


def test_scheduler_examples():
    s = PlateauScheduler(1e-3, patience=10, factor=0.5)
    for loss in np.linspace(1, 0.5, 30):
        assert s.step(loss) == 1e-3
    s = PlateauScheduler(1e-3, patience=10, factor=0.5, best=1.0)
    for _ in range(10):
        lr = s.step(1.0)
    assert lr == 5e-4
    s = PlateauScheduler(1e-3, patience=2, factor=0.5, min_lr=1e-5)
    for _ in range(100):
        lr = s.step(1.0)
    assert lr == 1e-5 and s.exhausted


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        OptConfig(lr=0)
    with pytest.raises(InvalidArgumentError):
        OptConfig(init="random")
    assert OptConfig(loss={"alpha1": 2.0}).loss.alpha1 == 2.0


def test_gradients_match_fd_control_grid():
    rng = np.random.default_rng(4)
    case = random_case(rng, (17, 17))
    lat = rng.uniform(-2, 2, (3, 17, 17))
    ctrl = offset_field(rng, (3, 3), 5, low=0.1, high=0.35, wiggle=0.02, sigma=0.5)
    st = OptState.zeros(5, (17, 17), lat, (3, 3))
    st.velocities = torch.as_tensor(ctrl)
    g = compute_gradients(case, st, LossConfig(), spacing=8)
    # FD oracle on the control parameters through the same expansion
    from jointivim.losses import latent_objective
    from jointivim.warp import expand_velocities
    h = 1e-4
    fd = np.zeros_like(ctrl)
    im = torch.as_tensor(case.images)
    for idx in np.ndindex(*ctrl.shape):
        vals = []
        for s in (h, -h):
            c = ctrl.copy()
            c[idx] += s
            dense = expand_velocities(torch.as_tensor(c), (17, 17), 8)
            vals.append(float(latent_objective(im, case.bvalues, torch.as_tensor(lat), dense, LossConfig())[0]))
        fd[idx] = (vals[0] - vals[1]) / (2 * h)
    assert np.linalg.norm(g["velocities"] - fd) / np.linalg.norm(fd) < 1e-4


def test_fit_stationary_at_exact_optimum():
    case, gt = make_phantom(PhantomSpec(shape=(16, 16), uniform=True))
    lat = latents_from_maps(gt.maps)
    g = compute_gradients(case, OptState.zeros(5, case.shape, lat), LossConfig(1, 0, 0))
    assert np.linalg.norm(g["latents"]) < 1e-6


def test_similarity_gradient_vanishes_for_identical_images(rng):
    img = rng.uniform(0.2, 1, (16, 16))
    from jointivim.case import DwiCase
    case = DwiCase(np.stack([img] * 6), (0, 50, 100, 200, 400, 600))
    g = compute_gradients(case, OptState.zeros(5, case.shape), LossConfig(0, 0, 1))
    assert np.abs(g["velocities"]).max() < 1e-12


def test_fd_helper_on_latents_only(rng):
    case = random_case(rng, (8, 8))
    lat = rng.uniform(-2, 2, (3, 8, 8))
    vel = offset_field(rng, (8, 8), 5, low=0.1, high=0.35, wiggle=0.05)
    st = OptState.zeros(5, (8, 8), lat)
    st.velocities = torch.as_tensor(vel)
    g = compute_gradients(case, st)
    fl, fv = fd_gradient(case.images, case.bvalues, lat, vel)
    assert np.linalg.norm(g["latents"] - fl) / np.linalg.norm(fl) < 1e-6
    assert np.linalg.norm(g["velocities"] - fv) / np.linalg.norm(fv) < 1e-4


@pytest.fixture(scope="module")
def static_runs(static_phantom):
    case, gt = static_phantom
    return gt, {name: optimize_case(case, OptConfig(loss=loss)) for name, loss in
                (("default", LossConfig()), ("minor", GROUP1))}


def _mean_disp(res):
    return float(np.sqrt((res.deformations ** 2).sum(1)).mean())


def test_static_noiseless_f_error(static_runs):
    gt, runs = static_runs
    for res in runs.values():
        assert np.sqrt(np.mean((res.maps.f - gt.maps.f)[gt.roi] ** 2)) < 0.02


def test_static_noiseless_fit_minor_weights(static_runs):
    _, runs = static_runs
    assert runs["minor"].final.fit < 1e-3


@pytest.mark.xfail(strict=True, reason="major-motion weights trade fit for similarity: fit ~1.03e-3")
def test_static_noiseless_fit_default_weights(static_runs):
    _, runs = static_runs
    assert runs["default"].final.fit < 1e-3


@pytest.mark.parametrize("name", ["default", "minor"])
def test_static_noiseless_motion(static_runs, name):
    _, runs = static_runs
    assert _mean_disp(runs[name]) < 0.3


def test_best_iterate_and_bounds(small_static):
    case, _ = small_static
    res = optimize_case(case, SHORT)
    totals = [t["total"] for t in res.trace]
    assert res.final.total <= totals[0] + 1e-12
    assert res.final.total == pytest.approx(min(totals), rel=1e-9)
    assert res.trace[res.best_iteration]["total"] == min(totals)
    for p in ("D", "f", "Dstar"):
        lo, hi = getattr(DEFAULT_BOUNDS, p)
        arr = getattr(res.maps, p)
        assert arr.min() >= lo and arr.max() <= hi
    assert res.iterations == len(res.trace)


def test_deterministic(small_static):
    case, _ = small_static
    a = optimize_case(case, OptConfig(max_iter=20, seed=3))
    b = optimize_case(case, OptConfig(max_iter=20, seed=3))
    assert np.array_equal(a.maps.f, b.maps.f)
    assert np.array_equal(a.velocities, b.velocities)
    assert a.trace == b.trace


def test_callback_and_mid_bounds_init(small_static):
    case, _ = small_static
    seen = []
    optimize_case(case, OptConfig(max_iter=5, init="mid-bounds"), callback=lambda i, t: seen.append(i))
    assert seen == list(range(5))


def test_non_finite_loss_reports_iteration(small_static):
    case, _ = small_static
    bad = case.with_images(case.images.copy())
    with pytest.raises(NonFiniteLossError) as err:
        optimize_case(bad, OptConfig(max_iter=5, lr=1e308))
    assert err.value.iteration == 1


def test_requires_five_images():
    from jointivim.case import DwiCase
    case = DwiCase(np.ones((4, 8, 8)), (0, 100, 200, 400))
    with pytest.raises(InvalidArgumentError):
        optimize_case(case, SHORT)


@pytest.mark.slow
def test_more_smoothing_weight_smoother_fields():
    from jointivim.case import normalize_case
    from jointivim.phantom import simulate
    ratios = []
    for seed in range(3):
        case, _ = simulate(PhantomSpec(shape=(48, 48), motion_px=4, snr=20, seed=seed))
        case = normalize_case(case)
        base = optimize_case(case, OptConfig(max_iter=150))
        cfg = OptConfig(max_iter=150, loss=dataclasses.replace(LossConfig(), alpha2=0.15))
        heavy = optimize_case(case, cfg)
        ratios.append(heavy.final.smooth - base.final.smooth)
    assert np.median(ratios) <= 0
