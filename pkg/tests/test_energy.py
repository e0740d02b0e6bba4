import numpy as np
import pytest

from facefit.config import EnergyConfig
from facefit.data import GROUPS, Observations, TrackingParams
from facefit.energy import (
    TERMS,
    check_gradient,
    energy_alignment,
    energy_deform,
    energy_flame_reg,
    energy_mica,
    energy_temporal,
    gradient,
    total_energy,
)
from facefit.geometry import Camera, RigidTransform, project
from facefit.model import BlendshapeModel, Region
from facefit.fitting import world_vertices
from oracles import naive_energy

LAMBDAS = dict(flame=1e-4, temp=10.0, mica=100.0, deform=1e3)


def _tiny_model(n=1, n_id=3, n_ex=2):
    v = np.zeros((n, 3))
    return BlendshapeModel(
        template=v,
        identity_basis=np.zeros((n, 3, n_id)),
        expression_basis=np.zeros((n, 3, n_ex)),
        joint_regressor=np.full((1, n), 1.0 / n),
        skin_weights=np.ones((n, 1)),
        joint_parents=np.array([-1]),
        vertex_weights=np.ones(n),
        region_labels=np.full(n, int(Region.NOSE), dtype=np.uint8),
        uv_coords=np.zeros((n, 2)),
        triangles=np.zeros((1, 3), dtype=np.int64),
    )


def _tiny_params(model, frames):
    cam = Camera(RigidTransform(np.zeros(3), np.array([0.0, 0.0, 2.0])), 100.0, np.array([50.0, 50.0]), (100, 100))
    return TrackingParams.initial(model, frames, [cam])


def _one_obs(params, model, offset, sigma):
    world = world_vertices(params, model)
    pix, _, _ = project(params.cameras[0], world[0, :1])
    return Observations([0], [0], [0], pix + offset, [sigma])


def test_alignment_zero_when_projection_matches(small_problem, model):
    ds, gt = small_problem
    exact = Observations(ds.observations.vertex, ds.observations.camera, ds.observations.frame, _projections(gt, ds.observations, model), ds.observations.sigma)
    assert energy_alignment(gt, exact, model) < 1e-20  # numpy vs torch rounding only


def _projections(params, obs, model):
    world = world_vertices(params, model)
    out = np.empty((len(obs), 2))
    for j, cam in enumerate(params.cameras):
        sel = obs.camera == j
        out[sel] = project(cam, world[obs.frame[sel], obs.vertex[sel]])[0]
    return out


@pytest.mark.parametrize("sigma,expect", [(1.0, 0.5), (2.0, 0.125)])
def test_alignment_hand_values(sigma, expect):
    m = _tiny_model()
    p = _tiny_params(m, 1)
    assert energy_alignment(p, _one_obs(p, m, np.array([1.0, 0.0]), sigma), m) == pytest.approx(expect, rel=1e-12)


def test_alignment_low_weight_outside_face(model):
    m = _tiny_model()
    other = BlendshapeModel(**{**{k: getattr(m, k) for k in m.__dataclass_fields__ if k != "extra"}, "region_labels": np.array([int(Region.OTHER)], dtype=np.uint8)})
    p = _tiny_params(other, 1)
    assert energy_alignment(p, _one_obs(p, other, np.array([1.0, 0.0]), 1.0), other) == pytest.approx(0.5 * 0.005, rel=1e-12)


def test_flame_hand_values():
    m = _tiny_model()
    p = _tiny_params(m, 2)
    assert energy_flame_reg(p, EnergyConfig()) == 0.0
    p.beta[:] = [0.6, 0.8, 0.0]
    assert energy_flame_reg(p, EnergyConfig(lambda_flame=1.0)) == pytest.approx(1.0, rel=1e-15)
    p.beta[:] = 0
    p.phi[1] = [1.0, np.sqrt(2.0)]
    assert energy_flame_reg(p, EnergyConfig(lambda_flame=2.0)) == pytest.approx(6.0, rel=1e-15)


def test_temporal_hand_values():
    m = _tiny_model()
    cfg = EnergyConfig(lambda_temp=1.0)
    p = _tiny_params(m, 3)
    p.head_translation[:, 0] = [0.0, 0.0, 1.0]
    assert energy_temporal(p, m, cfg) == pytest.approx(1.0, rel=1e-15)
    p.head_translation[:, 0] = [0.0, 0.3, 0.6]
    assert energy_temporal(p, m, cfg) == pytest.approx(0.0, abs=1e-28)
    p2 = _tiny_params(m, 2)
    p2.head_translation[:, 0] = [0.0, 1.0]
    assert energy_temporal(p2, m, cfg) == 0.0


def test_mica_hand_values():
    m = _tiny_model(n=3)
    p = _tiny_params(m, 1)
    tmpl = m.template.copy()
    assert energy_mica(p, EnergyConfig(lambda_mica=1.0, mica_template=tmpl), m) == 0.0
    tmpl[1, 2] += 0.01
    assert energy_mica(p, EnergyConfig(lambda_mica=1.0, mica_template=tmpl), m) == pytest.approx(1e-4, rel=1e-12)
    _, terms = total_energy(p, Observations([], [], [], np.zeros((0, 2)), []), EnergyConfig(), m)
    assert terms.mica == 0.0 and not terms.mica_active


def test_mica_template_size_mismatch(model):
    m = _tiny_model(n=3)
    with pytest.raises(ValueError, match="template"):
        energy_mica(_tiny_params(m, 1), EnergyConfig(mica_template=np.zeros((4, 3))), m)


def test_deform_hand_values():
    m = _tiny_model(n=2)
    p = _tiny_params(m, 1)
    assert energy_deform(p, EnergyConfig(lambda_deform=1.0)) == 0.0
    p.delta_d[1] = [3e-3, 0.0, 4e-3]
    assert energy_deform(p, EnergyConfig(lambda_deform=1.0)) == pytest.approx(2.5e-5, rel=1e-12)
    assert energy_deform(p, EnergyConfig(lambda_deform=0.0)) == 0.0


def _config(ds, **kw):
    return EnergyConfig(mica_template=ds.mica_template, **kw)


def test_total_is_bit_exact_sum_of_terms(small_problem, model):
    ds, gt = small_problem
    cfg = _config(ds)
    total, terms = total_energy(gt, ds.observations, cfg, model)
    parts = [
        energy_alignment(gt, ds.observations, model, cfg),
        energy_flame_reg(gt, cfg),
        energy_temporal(gt, model, cfg),
        energy_mica(gt, cfg, model),
        energy_deform(gt, cfg),
    ]
    assert parts == [terms.alignment, terms.flame, terms.temporal, terms.mica, terms.deform]
    assert total == parts[0] + parts[1] + parts[2] + parts[3] + parts[4]


def test_all_terms_zero_gives_zero(model):
    m = _tiny_model()
    p = _tiny_params(m, 3)
    total, _ = total_energy(p, _one_obs(p, m, np.zeros(2), 1.0), EnergyConfig(), m)
    assert total == 0.0


@pytest.mark.parametrize("posed", [False, True])
def test_total_matches_naive_reevaluation(small_problem, model, posed):
    ds, gt = small_problem
    p = gt.copy()
    rng = np.random.default_rng(7)
    p.phi += rng.normal(0, 0.1, p.phi.shape)
    p.head_translation += rng.normal(0, 1e-3, p.head_translation.shape)
    if posed:
        p.theta += rng.normal(0, 0.1, p.theta.shape)
    cfg = _config(ds)
    _, terms = total_energy(p, ds.observations, cfg, model)
    ref = naive_energy(p, ds.observations, model, LAMBDAS, template=ds.mica_template)
    for name in TERMS:
        assert getattr(terms, name) == pytest.approx(ref[name], rel=1e-10, abs=1e-14), name


def test_terms_non_negative(small_problem, model):
    ds, gt = small_problem
    for seed in range(3):
        p = gt.copy()
        p.beta += np.random.default_rng(seed).normal(size=p.beta.shape)
        _, terms = total_energy(p, ds.observations, _config(ds), model)
        assert all(getattr(terms, n) >= 0 for n in TERMS)


def test_permutation_invariance(small_problem, model):
    ds, gt = small_problem
    o = ds.observations
    perm = np.random.default_rng(3).permutation(len(o))
    shuffled = Observations(o.vertex[perm], o.camera[perm], o.frame[perm], o.mu[perm], o.sigma[perm])
    a, _ = total_energy(gt, o, _config(ds), model)
    b, _ = total_energy(gt, shuffled, _config(ds), model)
    assert a == b


def test_behind_camera_contributes_zero_and_is_counted(model):
    m = _tiny_model()
    p = _tiny_params(m, 1)
    obs = _one_obs(p, m, np.array([5.0, 0.0]), 1.0)
    p.head_translation[0, 2] = -3.0  # vertex now behind the camera
    _, terms = total_energy(p, obs, EnergyConfig(), m)
    assert terms.alignment == 0.0 and terms.n_invalid == 1


def test_frozen_groups_get_exact_zero(small_problem, model):
    ds, gt = small_problem
    cfg = _config(ds, freeze=("theta", "beta", "head_translation"))
    g = gradient(gt, ds.observations, cfg, model)
    for name in ("theta", "beta", "head_translation"):
        assert not np.any(g[name])
    assert np.any(g["phi"])


def test_calibrated_cameras_and_deform_mask_get_zero(model):
    from facefit.synth import SynthSpec, generate_sequence

    ds, gt = generate_sequence(model, SynthSpec(frames=2, cameras=2, seed=1, sigma_obs=1.0))
    cfg = EnergyConfig(deformable_regions=("nose",))
    g = gradient(gt, ds.observations, cfg, model)
    assert not np.any(g["cam_rotation"]) and not np.any(g["cam_focal"])
    outside = ~model.region_mask(("nose",))
    assert not np.any(g["delta_d"][outside]) and np.any(g["delta_d"][~outside])


def test_gradient_vanishes_at_noiseless_minimum(model):
    from facefit.synth import SynthSpec, generate_sequence

    ds, gt = generate_sequence(model, SynthSpec(frames=3, cameras=2, seed=2, calibrated=False))
    cfg = EnergyConfig(lambda_flame=0.0, lambda_temp=0.0, lambda_mica=0.0, freeze=("theta", "delta_d"))
    g = gradient(gt, ds.observations, cfg, model)
    assert np.sqrt(sum(np.sum(v**2) for v in g.values())) < 1e-8


@pytest.mark.parametrize("terms", [(t,) for t in TERMS] + [TERMS])
def test_gradient_matches_finite_differences(small_problem, model, terms):
    ds, gt = small_problem
    p = gt.copy()
    rng = np.random.default_rng(11)
    p.phi += rng.normal(0, 0.2, p.phi.shape)
    p.theta += rng.normal(0, 0.1, p.theta.shape)
    p.cam_focal *= 1.05
    cfg = _config(ds, freeze=(), deformable_regions=("nose", "mouth"))
    res = check_gradient(p, ds.observations, cfg, model, terms, n_coords=60, seed=5)
    assert len(res.coords) == 60
    assert {g for g, _ in res.coords} == set(GROUPS)
    assert res.max_rel_error < 1e-4


def test_gradient_matches_fd_of_naive_energy(small_problem, model):
    """Central differences of the standalone re-evaluation, independent of the torch path."""
    ds, gt = small_problem
    p = gt.copy()
    p.phi += 0.1
    cfg = _config(ds, freeze=())
    g = gradient(p, ds.observations, cfg, model)

    def e(q):
        return sum(naive_energy(q, ds.observations, model, LAMBDAS, template=ds.mica_template).values())

    for name, idx in [("beta", (2,)), ("phi", (1, 3)), ("head_rotation", (0, 1)), ("cam_focal", (1,)), ("cam_translation", (0, 2)), ("theta", (2, 4))]:
        x = getattr(p, name)[idx]
        h = 1e-6 * max(1.0, abs(x))
        vals = []
        for s in (1, -1):
            q = p.copy()
            getattr(q, name)[idx] = x + s * h
            vals.append(e(q))
        fd = (vals[0] - vals[1]) / (2 * h)
        assert g[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-5 * max(1.0, e(p))), name


def test_per_frame_decomposition(model):
    """Without coupling terms, the energy and its per-frame gradient split by frame."""
    from facefit.synth import SynthSpec, generate_sequence

    ds, gt = generate_sequence(model, SynthSpec(frames=3, cameras=2, seed=9, sigma_obs=1.0))
    cfg = EnergyConfig(lambda_flame=0.0, lambda_temp=0.0, lambda_mica=0.0, lambda_deform=0.0)
    total, _ = total_energy(gt, ds.observations, cfg, model)
    parts = 0.0
    g_all = gradient(gt, ds.observations, cfg, model)
    for t in range(3):
        sub = ds.observations.subset(ds.observations.frame == t)
        e_t, _ = total_energy(gt, sub, cfg, model)
        parts += e_t
        g_t = gradient(gt, sub, cfg, model)
        np.testing.assert_allclose(g_t["phi"][t], g_all["phi"][t], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(g_t["head_rotation"][t], g_all["head_rotation"][t], rtol=1e-10, atol=1e-12)
    assert parts == pytest.approx(total, rel=1e-12)
