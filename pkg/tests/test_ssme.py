import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facefit.model import Region
from facefit.raster import NO_LABEL, FlowField, ScreenMesh, rasterize, rasterize_flow
from facefit.ssme import (
    epe,
    evaluate_ssme,
    merge_reports,
    screen_meshes,
    ssme_aggregate,
    ssme_h,
    temporal_gaussian_filter,
)
from facefit.synth import SynthSpec, generate_sequence, rig_cameras
from facefit.fitting import world_vertices


def _grid_mesh(n=8, lo=10.0, hi=50.0, depth=1.0, label=int(Region.FACE)):
    xs = np.linspace(lo, hi, n)
    x, y = np.meshgrid(xs, xs)
    pos = np.stack([x.ravel(), y.ravel()], axis=1)
    tris = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            tris += [[a, a + 1, a + n], [a + 1, a + n + 1, a + n]]
    return ScreenMesh(pos, np.full(len(pos), depth), np.array(tris), np.full(len(pos), label, dtype=np.uint8))


def _field(flow, valid=None, label=int(Region.FACE)):
    h, w = flow.shape[:2]
    valid = np.ones((h, w), bool) if valid is None else valid
    return FlowField(w, h, flow, valid, np.full((h, w), label, dtype=np.uint8))


def test_static_mesh_zero_flow():
    m = _grid_mesh()
    f = rasterize_flow(m, m, 64, 64)
    assert f.valid.sum() > 1000
    assert np.all(f.flow[f.valid] == 0.0)


def test_translated_mesh_constant_flow():
    m = _grid_mesh()
    f = rasterize_flow(m, m.shifted((3.0, 4.0)), 64, 64)
    np.testing.assert_allclose(f.flow[f.valid], np.tile([3.0, 4.0], (f.valid.sum(), 1)), atol=1e-12)


def test_nearer_triangle_wins():
    # two overlapping triangles: the far one (depth 2) moves by (1, 0), the near one (depth 1) by (0, 5)
    pos = np.array([[0, 0], [40, 0], [0, 40], [0, 0], [40, 0], [0, 40]], dtype=float)
    depths = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    t0 = ScreenMesh(pos, depths, tris)
    moved = pos + np.array([[1, 0]] * 3 + [[0, 5]] * 3)
    f = rasterize_flow(t0, ScreenMesh(moved, depths, tris), 48, 48)
    np.testing.assert_allclose(f.flow[f.valid], np.tile([0.0, 5.0], (f.valid.sum(), 1)), atol=1e-12)
    # same answer whichever triangle is listed first
    g = rasterize_flow(ScreenMesh(pos, depths, tris[::-1]), ScreenMesh(moved, depths, tris[::-1]), 48, 48)
    np.testing.assert_array_equal(g.flow, f.flow)


def test_uncovered_pixels_invalid_and_unlabelled():
    f = rasterize_flow(_grid_mesh(lo=10, hi=20), _grid_mesh(lo=10, hi=20), 64, 64)
    assert not f.valid[0, 0] and f.labels[0, 0] == NO_LABEL
    assert f.valid[15, 15] and f.labels[15, 15] == int(Region.FACE)


def test_degenerate_triangle_skipped():
    pos = np.array([[0, 0], [10, 10], [20, 20], [0, 0], [30, 0], [0, 30]], dtype=float)
    m = ScreenMesh(pos, np.ones(6), np.array([[0, 1, 2], [3, 4, 5]]))
    cov = rasterize(m, 32, 32)
    assert np.all(cov.tri == 1)


def test_epe_examples():
    z = np.zeros((4, 4, 2))
    gt = _field(z)
    assert epe(_field(z), gt) == (0.0, 1.0)
    assert epe(_field(z + [3.0, 4.0]), gt)[0] == pytest.approx(5.0, abs=1e-15)
    half = z.copy()
    half[:2, :, 1] = 2.0
    assert epe(_field(half), gt)[0] == pytest.approx(1.0, abs=1e-15)


def test_epe_undefined_and_coverage():
    z = np.zeros((4, 4, 2))
    valid = np.zeros((4, 4), bool)
    valid[0] = True
    val, cov = epe(_field(z, valid), _field(z))
    assert val == 0.0 and cov == 0.25
    val, cov = epe(_field(z, np.zeros((4, 4), bool)), _field(z))
    assert math.isnan(val) and cov == 0.0
    val, _ = epe(_field(z), _field(z, label=int(Region.EARS)), "nose")
    assert math.isnan(val)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_epe_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 6, 2)), rng.normal(size=(5, 6, 2))
    valid = rng.random((5, 6)) < 0.7
    assert epe(_field(a, valid), _field(b, valid)) == epe(_field(b, valid), _field(a, valid))


def test_ssme_h_examples():
    assert ssme_h([2.0, 4.0], 3, 1) == 3.0
    assert ssme_h([0.0, 0.0, 0.0], 4, 1) == 0.0
    assert ssme_h([1.7], 2, 1) == 1.7
    assert math.isnan(ssme_h([], 2, 2))


def test_ssme_aggregate_examples():
    assert ssme_aggregate([2.5] * 7) == 2.5
    assert ssme_aggregate([1.0, 2.0, 3.0]) == 2.0
    assert ssme_aggregate([4.2]) == 4.2
    assert ssme_aggregate([1.0, math.nan, 3.0]) == 2.0


def test_gaussian_filter_examples():
    rng = np.random.default_rng(0)
    tracks = rng.normal(size=(20, 7, 2))
    np.testing.assert_array_equal(temporal_gaussian_filter(tracks, 0.0), tracks)
    const = np.broadcast_to(rng.normal(size=(1, 7, 2)), (20, 7, 2))
    np.testing.assert_allclose(temporal_gaussian_filter(const, 2.0), const, atol=1e-14)
    impulse = np.zeros((41, 1, 1))
    impulse[20] = 1.0
    out = temporal_gaussian_filter(impulse, 2.5)
    assert out.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.count_nonzero(out) == 2 * math.ceil(7.5) + 1
    with pytest.raises(ValueError):
        temporal_gaussian_filter(tracks, -1.0)


def _tracked_sequence(model, frames=6):
    ds, gt = generate_sequence(model, SynthSpec(frames=frames, cameras=1, seed=2, motion="orbit"))
    cam = rig_cameras(SynthSpec(cameras=1))[0]
    return screen_meshes(world_vertices(gt, model), cam, model.triangles, model.region_labels)


def test_ssme_against_itself_is_exactly_zero(model):
    seq = _tracked_sequence(model)
    rep = evaluate_ssme(seq, seq, 512, 512, horizons=5, regions=("face", "eyes", "nose", "mouth", "ears", "all"))
    for r in rep.regions:
        defined = rep.table[r][np.isfinite(rep.table[r])]
        assert len(defined) and np.all(defined == 0.0), r


def test_constant_drift_gives_h_times_d():
    base = _grid_mesh(n=10, lo=100, hi=400)
    d = np.array([0.6, 0.8])  # 1 px per frame
    frames = 8
    gt = [base for _ in range(frames)]
    pred = [base.shifted(t * d) for t in range(frames)]
    rep = evaluate_ssme(gt, pred, 512, 512, horizons=frames - 1, regions=("face",))
    np.testing.assert_allclose(rep.table["face"], np.arange(1, frames), atol=0.1)


def test_resolution_consistency(model):
    seq = _tracked_sequence(model, frames=3)
    drift = [m.shifted((0.0, 0.0)) for m in seq]
    pred = [ScreenMesh(m.positions + 0.01 * (m.positions - 256.0), m.depths, m.triangles, None) for m in drift]

    def run(scale):
        g = [ScreenMesh(m.positions * scale, m.depths, m.triangles, m.labels) for m in seq]
        p = [ScreenMesh(m.positions * scale, m.depths, m.triangles, None) for m in pred]
        return evaluate_ssme(g, p, int(512 * scale), int(512 * scale), horizons=1, regions=("face",)).table["face"][0] / scale

    lo, hi = run(1.0), run(2.0)
    assert abs(hi - lo) / lo < 0.05


def test_integer_shift_invariance(model):
    seq = _tracked_sequence(model, frames=3)
    pred = [ScreenMesh(m.positions + [[0.5, -0.3]], m.depths, m.triangles, None) for m in seq]
    a = evaluate_ssme(seq, pred, 512, 512, horizons=2, regions=("face",)).table["face"]
    sh = lambda ms: [m.shifted((7.0, -4.0)) for m in ms]
    b = evaluate_ssme(sh(seq), sh(pred), 512, 512, horizons=2, regions=("face",)).table["face"]
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_frame_count_mismatch():
    m = _grid_mesh()
    with pytest.raises(ValueError, match="frame count"):
        evaluate_ssme([m, m], [m], 64, 64)


def test_report_csv_layout():
    m = _grid_mesh()
    rep = evaluate_ssme([m] * 3, [m] * 3, 64, 64, horizons=2, regions=("face", "nose"))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "region,h,ssme_px,coverage"
    assert lines[1] == "face,1,0,1"
    assert lines[-1] == "nose,mean,nan,nan"  # region absent from the fixture
    assert len(lines) == 1 + 2 * 2 + 2


def test_merge_reports_averages_cameras():
    base = _grid_mesh(n=6, lo=10, hi=50)
    gt = [base] * 3
    a = evaluate_ssme(gt, [base.shifted((t * 1.0, 0)) for t in range(3)], 64, 64, horizons=2, regions=("face",))
    b = evaluate_ssme(gt, [base.shifted((t * 3.0, 0)) for t in range(3)], 64, 64, horizons=2, regions=("face",))
    m = merge_reports([a, b])
    np.testing.assert_allclose(m.table["face"], (a.table["face"] + b.table["face"]) / 2, atol=1e-12)
    assert merge_reports([a]) is a
