import numpy as np
import pytest

from facefit import io as fio
from facefit.config import EnergyConfig
from facefit.energy import energy_alignment
from facefit.fitting import reprojection_errors, world_vertices
from facefit.synth import SynthSpec, generate_sequence, perturb_params
from facefit.geometry import project


def test_same_seed_bit_identical(model):
    a, ga = generate_sequence(model, SynthSpec(frames=4, seed=3, sigma_obs=1.0, occlusion=0.3))
    b, gb = generate_sequence(model, SynthSpec(frames=4, seed=3, sigma_obs=1.0, occlusion=0.3))
    assert fio.write_container(fio.sequence_to_container(a)) == fio.write_container(fio.sequence_to_container(b))
    assert fio.write_container(fio.params_to_container(ga)) == fio.write_container(fio.params_to_container(gb))
    c, _ = generate_sequence(model, SynthSpec(frames=4, seed=4, sigma_obs=1.0, occlusion=0.3))
    assert not np.array_equal(c.observations.mu[:10], a.observations.mu[:10])


def test_noiseless_observations_are_exact_projections(model):
    ds, gt = generate_sequence(model, SynthSpec(frames=3, cameras=3, seed=1))
    assert np.all(reprojection_errors(gt, ds.observations, model) == 0.0)
    assert len(ds.observations) == 3 * 3 * model.n_vertices
    np.testing.assert_array_equal(ds.gt_vertices, world_vertices(gt, model))


def test_noise_std(model):
    ds, gt = generate_sequence(model, SynthSpec(frames=160, cameras=2, seed=0, sigma_obs=2.0, sigma_spread=0.0, motion="static"))
    obs = ds.observations
    assert len(obs) > 1e5 * 0.5
    world = world_vertices(gt, model)
    resid = np.empty((len(obs), 2))
    for j, cam in enumerate(gt.cameras):
        sel = obs.camera == j
        resid[sel] = obs.mu[sel] - project(cam, world[obs.frame[sel], obs.vertex[sel]])[0]
    std = resid.std(axis=0)
    assert np.all((std >= 1.96) & (std <= 2.04)), std


def test_truthful_sigma_chi_square(model):
    ds, gt = generate_sequence(model, SynthSpec(frames=310, cameras=2, seed=1, sigma_obs=2.0, motion="static"))
    n = len(ds.observations)
    assert n >= 1e5
    cfg = EnergyConfig(vertex_weight_low=1.0)
    # each observation contributes |noise|^2 / (2 sigma^2) ~ chi2(2) / 2, expectation 1
    assert energy_alignment(gt, ds.observations, model, cfg) == pytest.approx(n, rel=0.1)


def test_occlusion_fraction(model):
    ds, _ = generate_sequence(model, SynthSpec(frames=20, cameras=2, seed=2, occlusion=0.2))
    kept = len(ds.observations) / (20 * 2 * model.n_vertices)
    assert kept == pytest.approx(0.8, abs=0.02)


def test_sigma_modes(model):
    base = dict(frames=2, cameras=1, seed=5, sigma_obs=2.0)
    truthful, _ = generate_sequence(model, SynthSpec(**base))
    const, _ = generate_sequence(model, SynthSpec(**base, sigma_mode="constant", sigma_factor=3.0))
    mis, _ = generate_sequence(model, SynthSpec(**base, sigma_mode="miscalibrated", sigma_factor=2.0))
    assert np.all(const.observations.sigma == 3.0)
    np.testing.assert_allclose(mis.observations.sigma, 2 * truthful.observations.sigma)
    np.testing.assert_array_equal(mis.observations.mu, truthful.observations.mu)


def test_spec_validation():
    for bad in (dict(frames=0), dict(occlusion=1.0), dict(sigma_obs=-1.0), dict(motion="walk")):
        with pytest.raises(ValueError):
            SynthSpec(**bad)


def test_mica_template(model):
    ds, gt = generate_sequence(model, SynthSpec(frames=1, seed=0, delta_d_scale=1e-3))
    np.testing.assert_allclose(ds.mica_template, model.template + model.identity_basis @ gt.beta + gt.delta_d, atol=1e-15)
    none, _ = generate_sequence(model, SynthSpec(frames=1, seed=0, mica_noise=None))
    assert none.mica_template is None


def test_perturb_examples(small_problem):
    _, gt = small_problem
    same = perturb_params(gt, 0.0, 1)
    for g in ("beta", "phi", "head_rotation", "cam_focal"):
        np.testing.assert_array_equal(getattr(same, g), getattr(gt, g))
    a, b = perturb_params(gt, 0.1, 7), perturb_params(gt, 0.1, 7)
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.cam_focal, b.cam_focal)


def test_perturb_linear_in_magnitude(small_problem):
    _, gt = small_problem
    for seed in (1, 2):
        d1 = perturb_params(gt, 0.05, seed)
        d2 = perturb_params(gt, 0.15, seed)
        for g in ("beta", "phi", "head_translation", "cam_rotation", "cam_focal"):
            np.testing.assert_allclose(getattr(d2, g) - getattr(gt, g), 3 * (getattr(d1, g) - getattr(gt, g)), rtol=1e-9, atol=1e-12)


def test_perturb_leaves_calibrated_cameras(model):
    _, gt = generate_sequence(model, SynthSpec(frames=2, seed=0))
    p = perturb_params(gt, 0.3, 0)
    np.testing.assert_array_equal(p.cam_rotation, gt.cam_rotation)
    assert not np.array_equal(p.beta, gt.beta)
