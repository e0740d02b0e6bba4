import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from facefit import io as fio
from facefit.config import CONFIG_KEYS, ConfigError, EnergyConfig, load_config
from facefit.synth import SynthSpec, generate_sequence


def test_model_round_trip_byte_identical(model, tmp_path):
    data = fio.write_container(fio.model_to_container(model))
    back = fio.model_from_container(fio.read_container(data))
    assert fio.write_container(fio.model_to_container(back)) == data
    for name in ("template", "identity_basis", "skin_weights", "joint_parents", "region_labels", "triangles"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    fio.save_model(tmp_path / "m.ftm", model)
    assert (tmp_path / "m.ftm").read_bytes() == data


def test_sequence_and_params_round_trip(model, tmp_path):
    ds, gt = generate_sequence(model, SynthSpec(frames=3, cameras=2, seed=1, sigma_obs=1.0, occlusion=0.2))
    fio.save_sequence(tmp_path / "s.fts", ds)
    back = fio.load_sequence(tmp_path / "s.fts")
    assert fio.write_container(fio.sequence_to_container(back)) == (tmp_path / "s.fts").read_bytes()
    np.testing.assert_array_equal(back.observations.mu, ds.observations.mu)
    np.testing.assert_array_equal(back.gt_vertices, ds.gt_vertices)
    assert [c.calibrated for c in back.cameras] == [True, True]
    fio.save_params(tmp_path / "p.ftp", gt, {"note": "x"})
    p = fio.load_params(tmp_path / "p.ftp")
    for name in ("beta", "phi", "head_rotation", "cam_focal", "cam_principal"):
        np.testing.assert_array_equal(getattr(p, name), getattr(gt, name))
    assert fio.load_file(tmp_path / "p.ftp").meta == {"note": "x"}
    assert len(fio.load_cameras(tmp_path / "p.ftp")) == 2


chunk_arrays = st.one_of(
    arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=st.floats(-1e6, 1e6, allow_nan=False)),
    arrays(np.float32, array_shapes(max_dims=2, max_side=4), elements=st.floats(-1e3, 1e3, allow_nan=False, width=32)),
    arrays(np.uint32, array_shapes(max_dims=2, max_side=5)),
    arrays(np.uint8, array_shapes(max_dims=1, max_side=8)),
)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text("abcdefgh_", min_size=1, max_size=8), chunk_arrays, max_size=4))
def test_container_round_trip(chunks):
    c = fio.Container(b"FTS1", chunks)
    data = fio.write_container(c)
    back = fio.read_container(data)
    assert list(back.chunks) == list(chunks)
    for k, v in chunks.items():
        assert back.chunks[k].dtype == v.dtype and back.chunks[k].shape == v.shape
        np.testing.assert_array_equal(back.chunks[k], v)
    assert fio.write_container(back) == data


def test_truncated_file_names_sizes(model):
    data = fio.write_container(fio.model_to_container(model))
    with pytest.raises(fio.FormatError, match=r"truncated chunk '\w+' payload: expected \d+ bytes, only \d+ available"):
        fio.read_container(data[:-10])


def test_bad_magic_and_version():
    with pytest.raises(fio.FormatError, match="bad magic"):
        fio.read_container(b"XXXX" + bytes(8))
    with pytest.raises(fio.FormatError, match="version"):
        fio.read_container(b"FTM1" + struct.pack("<II", 7, 0))
    with pytest.raises(fio.FormatError, match="expected FTP1"):
        fio.read_container(fio.write_container(fio.Container(b"FTS1")), b"FTP1")


def test_size_mismatch_named():
    data = bytearray(fio.write_container(fio.Container(b"FTS1", {"abc": np.zeros(2)})))
    # declared payload size sits just before the 16-byte payload
    data[-24:-16] = struct.pack("<Q", 8)
    with pytest.raises(fio.FormatError, match="chunk 'abc' declares 8 bytes"):
        fio.read_container(bytes(data))


def test_unknown_chunk_preserved(model):
    c = fio.model_to_container(model)
    c.chunks["future_field"] = np.arange(4, dtype=np.uint32)
    data = fio.write_container(c)
    back = fio.model_from_container(fio.read_container(data))
    np.testing.assert_array_equal(back.extra["future_field"], np.arange(4))
    assert fio.write_container(fio.model_to_container(back)) == data


def test_nan_rejected():
    for bad in (np.nan, np.inf):
        data = fio.write_container(fio.Container(b"FTP1", {"beta": np.array([0.0, bad])}))
        with pytest.raises(fio.FormatError, match="'beta' contains NaN or Inf"):
            fio.read_container(data)


def test_nonpositive_sigma_rejected(model):
    ds, _ = generate_sequence(model, SynthSpec(frames=1, cameras=1, seed=0))
    c = fio.sequence_to_container(ds)
    c.chunks["obs_sigma"] = c.chunks["obs_sigma"].copy()
    c.chunks["obs_sigma"][3] = 0.0
    with pytest.raises(fio.FormatError, match="obs_sigma"):
        fio.sequence_from_container(fio.read_container(fio.write_container(c)))


def test_float32_observations_accepted(model):
    ds, _ = generate_sequence(model, SynthSpec(frames=1, cameras=1, seed=0))
    c = fio.sequence_to_container(ds)
    c.chunks["obs_mu"] = c.chunks["obs_mu"].astype(np.float32)
    back = fio.sequence_from_container(fio.read_container(fio.write_container(c)))
    np.testing.assert_allclose(back.observations.mu, ds.observations.mu, rtol=1e-6)


def test_little_endian_layout():
    data = fio.write_container(fio.Container(b"FTP1", {"x": np.array([1.0])}))
    assert data[:12] == b"FTP1" + struct.pack("<II", 1, 1)
    assert data[-8:] == struct.pack("<d", 1.0)


def test_mesh_sequence_round_trip(model, tmp_path):
    v = np.stack([model.template, model.template + 0.01])
    m = fio.MeshSequence(v, model.triangles, model.region_labels, np.arange(7))
    fio.save_meshes(tmp_path / "m.ftm", m)
    back = fio.load_meshes(tmp_path / "m.ftm")
    assert back.n_frames == 2
    np.testing.assert_array_equal(back.vertices, v)
    np.testing.assert_array_equal(back.keypoints, np.arange(7))


def test_obj_reader(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    v, f = fio.read_obj(p)
    assert f.tolist() == [[0, 1, 2], [0, 2, 3]]
    p.write_text("v 0 0\n")
    with pytest.raises(fio.FormatError, match="malformed"):
        fio.read_obj(p)


def test_config_defaults():
    cfg = load_config("{}")
    assert cfg.learning_rate_init == 1e-2 and cfg.lr_decay == 0.5 and cfg.lr_patience == 30
    assert (cfg.vertex_weight_high, cfg.vertex_weight_low) == (1.0, 0.005)
    assert cfg == EnergyConfig()


def test_config_errors():
    with pytest.raises(ConfigError, match="lambda_temp"):
        load_config('{"lambda_temp": -1}')
    with pytest.raises(ConfigError, match="lr_decay"):
        load_config('{"lr_decay": 1.0}')
    with pytest.raises(ConfigError) as exc:
        load_config('{"lambda_tmep": 1}')
    assert "lambda_tmep" in str(exc.value) and "lambda_temp" in str(exc.value)
    with pytest.raises(ConfigError, match="JSON"):
        load_config("{")


def test_config_round_trip():
    cfg = EnergyConfig(lambda_temp=3.0, freeze=("theta", "beta"), deformable_regions=("nose",))
    assert load_config(cfg.to_json()) == cfg
    assert set(json.loads(cfg.to_json())) == set(CONFIG_KEYS)
