"""Chunked little-endian containers (FTM1 model, FTS1 sequence, FTP1 params), OBJ and atomic writes.

Layout::

    magic[4] | version u32 | chunk_count u32
    repeated: name_len u16 | name utf-8 | dtype u8 | ndim u8 | shape u64[ndim] | nbytes u64 | payload

dtype codes: 1=f32, 2=f64, 3=u32, 4=u8. A chunk named ``meta`` holds UTF-8 JSON
as u8. Readers ignore chunks they do not know but keep them for rewriting.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Observations, SequenceDataset, TrackingParams
from .geometry import Camera, RigidTransform
from .model import ROOT, BlendshapeModel

VERSION = 1
MAGICS = (b"FTM1", b"FTS1", b"FTP1")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u4"), 4: np.dtype("u1")}
_CODES = {v: k for k, v in DTYPES.items()}
_U32_ROOT = 0xFFFFFFFF


class FormatError(ValueError):
    pass


@dataclass
class Container:
    magic: bytes
    chunks: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def meta(self) -> dict:
        if "meta" not in self.chunks:
            return {}
        return json.loads(self.chunks["meta"].tobytes().decode("utf-8"))

    def set_meta(self, meta: dict) -> None:
        text = json.dumps(meta, sort_keys=True, separators=(",", ":"))
        self.chunks["meta"] = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()

    def require(self, name: str) -> np.ndarray:
        if name not in self.chunks:
            raise FormatError(f"{self.magic.decode()} container is missing chunk '{name}'")
        return self.chunks[name]


def _canonical(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    for dt in DTYPES.values():
        if arr.dtype == dt.newbyteorder("="):
            return arr.astype(dt, copy=False)
    raise FormatError(f"chunk '{name}' has unsupported dtype {arr.dtype}")


def write_container(c: Container) -> bytes:
    if c.magic not in MAGICS:
        raise FormatError(f"unknown magic {c.magic!r}")
    out = [c.magic, struct.pack("<II", c.version, len(c.chunks))]
    for name, arr in c.chunks.items():
        arr = _canonical(name, arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = np.ascontiguousarray(arr).tobytes()
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: expected {n} bytes, only {len(self.data) - self.pos} available")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b


def read_container(data: bytes, expect_magic: bytes | None = None) -> Container:
    r = _Reader(bytes(data))
    magic = r.take(4, "header")
    if magic not in MAGICS or (expect_magic is not None and magic != expect_magic):
        want = expect_magic.decode() if expect_magic else "/".join(m.decode() for m in MAGICS)
        raise FormatError(f"bad magic {magic!r}, expected {want}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    chunks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "chunk header"))
        name = r.take(nlen, "chunk name").decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2, f"chunk '{name}' header"))
        if code not in DTYPES:
            raise FormatError(f"chunk '{name}' has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"chunk '{name}' shape"))
        (nbytes,) = struct.unpack("<Q", r.take(8, f"chunk '{name}' size"))
        dt = DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise FormatError(f"chunk '{name}' declares {nbytes} bytes but shape {shape} needs {expected}")
        arr = np.frombuffer(r.take(nbytes, f"chunk '{name}' payload"), dtype=dt).reshape(shape)
        if dt.kind == "f" and not np.all(np.isfinite(arr)):
            raise FormatError(f"chunk '{name}' contains NaN or Inf")
        chunks[name] = arr.copy()
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after last chunk")
    return Container(magic, chunks, version)


# ---------------------------------------------------------------- atomic files


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def load_file(path, expect_magic: bytes | None = None) -> Container:
    return read_container(Path(path).read_bytes(), expect_magic)


# ---------------------------------------------------------------- model

_MODEL_KEYS = (
    "template",
    "identity_basis",
    "expression_basis",
    "joint_regressor",
    "skin_weights",
    "joint_parents",
    "vertex_weights",
    "region_labels",
    "uv_coords",
    "triangles",
)


def model_to_container(model: BlendshapeModel) -> Container:
    parents = np.where(model.joint_parents == ROOT, _U32_ROOT, model.joint_parents).astype(np.uint32)
    chunks = {
        "template": model.template.astype(np.float64),
        "identity_basis": model.identity_basis.astype(np.float64),
        "expression_basis": model.expression_basis.astype(np.float64),
        "joint_regressor": model.joint_regressor.astype(np.float64),
        "skin_weights": model.skin_weights.astype(np.float64),
        "joint_parents": parents,
        "vertex_weights": model.vertex_weights.astype(np.float64),
        "region_labels": model.region_labels.astype(np.uint8),
        "uv_coords": model.uv_coords.astype(np.float64),
        "triangles": model.triangles.astype(np.uint32),
    }
    chunks.update(model.extra)
    return Container(b"FTM1", chunks)


def model_from_container(c: Container) -> BlendshapeModel:
    if c.magic != b"FTM1":
        raise FormatError(f"expected an FTM1 model container, got {c.magic!r}")
    g = {k: c.require(k) for k in _MODEL_KEYS}
    parents = g["joint_parents"].astype(np.int64)
    parents[g["joint_parents"] == _U32_ROOT] = ROOT
    f64 = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    return BlendshapeModel(
        template=f64(g["template"]),
        identity_basis=f64(g["identity_basis"]),
        expression_basis=f64(g["expression_basis"]),
        joint_regressor=f64(g["joint_regressor"]),
        skin_weights=f64(g["skin_weights"]),
        joint_parents=parents,
        vertex_weights=f64(g["vertex_weights"]),
        region_labels=g["region_labels"].astype(np.uint8),
        uv_coords=f64(g["uv_coords"]),
        triangles=g["triangles"].astype(np.int64),
        extra={k: v for k, v in c.chunks.items() if k not in _MODEL_KEYS},
    )


def save_model(path, model: BlendshapeModel) -> None:
    write_bytes_atomic(path, write_container(model_to_container(model)))


def load_model(path) -> BlendshapeModel:
    return model_from_container(load_file(path, b"FTM1"))


# ---------------------------------------------------------------- cameras

_CAM_KEYS = ("cam_rotation", "cam_translation", "cam_focal", "cam_principal", "cam_image_size", "cam_calibrated")


def _camera_chunks(cameras: list[Camera]) -> dict[str, np.ndarray]:
    return {
        "cam_rotation": np.array([c.extrinsics.rotation for c in cameras], dtype=np.float64).reshape(-1, 3),
        "cam_translation": np.array([c.extrinsics.translation for c in cameras], dtype=np.float64).reshape(-1, 3),
        "cam_focal": np.array([c.focal for c in cameras], dtype=np.float64),
        "cam_principal": np.array([c.principal_point for c in cameras], dtype=np.float64).reshape(-1, 2),
        "cam_image_size": np.array([c.image_size for c in cameras], dtype=np.uint32).reshape(-1, 2),
        "cam_calibrated": np.array([c.calibrated for c in cameras], dtype=np.uint8),
    }


def _cameras_from(c: Container) -> list[Camera]:
    g = {k: c.require(k) for k in _CAM_KEYS}
    n = len(g["cam_focal"])
    try:
        return [
            Camera(
                RigidTransform(g["cam_rotation"][j].astype(np.float64), g["cam_translation"][j].astype(np.float64)),
                float(g["cam_focal"][j]),
                g["cam_principal"][j].astype(np.float64),
                (int(g["cam_image_size"][j, 0]), int(g["cam_image_size"][j, 1])),
                bool(g["cam_calibrated"][j]),
            )
            for j in range(n)
        ]
    except ValueError as exc:
        raise FormatError(f"invalid camera block: {exc}") from exc


# ---------------------------------------------------------------- sequences

_SEQ_KEYS = _CAM_KEYS + ("obs_vertex", "obs_camera", "obs_frame", "obs_mu", "obs_sigma", "mica_template", "gt_vertices", "meta")


def sequence_to_container(ds: SequenceDataset) -> Container:
    obs = ds.observations
    chunks = _camera_chunks(ds.cameras)
    chunks.update(
        {
            "obs_vertex": obs.vertex.astype(np.uint32),
            "obs_camera": obs.camera.astype(np.uint32),
            "obs_frame": obs.frame.astype(np.uint32),
            "obs_mu": obs.mu.astype(np.float64),
            "obs_sigma": obs.sigma.astype(np.float64),
        }
    )
    if ds.mica_template is not None:
        chunks["mica_template"] = np.asarray(ds.mica_template, dtype=np.float64)
    if ds.gt_vertices is not None:
        chunks["gt_vertices"] = np.asarray(ds.gt_vertices, dtype=np.float64)
    c = Container(b"FTS1", chunks)
    c.set_meta({"n_frames": ds.n_frames, "n_vertices": ds.n_vertices})
    c.chunks.update({k: v for k, v in ds.extra.items() if k not in c.chunks})
    return c


def sequence_from_container(c: Container) -> SequenceDataset:
    if c.magic != b"FTS1":
        raise FormatError(f"expected an FTS1 sequence container, got {c.magic!r}")
    meta = c.meta
    for key in ("n_frames", "n_vertices"):
        if key not in meta:
            raise FormatError(f"FTS1 meta chunk is missing '{key}'")
    sigma = c.require("obs_sigma").astype(np.float64)
    if np.any(sigma <= 0):
        raise FormatError("chunk 'obs_sigma' has entries <= 0")
    try:
        obs = Observations(
            c.require("obs_vertex"),
            c.require("obs_camera"),
            c.require("obs_frame"),
            c.require("obs_mu").astype(np.float64),
            sigma,
        )
        return SequenceDataset(
            cameras=_cameras_from(c),
            n_frames=int(meta["n_frames"]),
            n_vertices=int(meta["n_vertices"]),
            observations=obs,
            mica_template=c.chunks["mica_template"].astype(np.float64) if "mica_template" in c.chunks else None,
            gt_vertices=c.chunks["gt_vertices"].astype(np.float64) if "gt_vertices" in c.chunks else None,
            extra={k: v for k, v in c.chunks.items() if k not in _SEQ_KEYS},
        )
    except ValueError as exc:
        raise FormatError(f"invalid FTS1 sequence: {exc}") from exc


def save_sequence(path, ds: SequenceDataset) -> None:
    write_bytes_atomic(path, write_container(sequence_to_container(ds)))


def load_sequence(path) -> SequenceDataset:
    return sequence_from_container(load_file(path, b"FTS1"))


# ---------------------------------------------------------------- fitted params

_PARAM_KEYS = ("beta", "phi", "theta", "delta_d", "head_rotation", "head_translation")


def params_to_container(p: TrackingParams, meta: dict | None = None) -> Container:
    chunks = {k: getattr(p, k).astype(np.float64) for k in _PARAM_KEYS}
    chunks.update(_camera_chunks(p.cameras))
    c = Container(b"FTP1", chunks)
    if meta:
        c.set_meta(meta)
    return c


def params_from_container(c: Container) -> TrackingParams:
    if c.magic != b"FTP1":
        raise FormatError(f"expected an FTP1 params container, got {c.magic!r}")
    g = {k: c.require(k) for k in _PARAM_KEYS + _CAM_KEYS}
    try:
        return TrackingParams(**{k: v for k, v in g.items()})
    except ValueError as exc:
        raise FormatError(f"invalid FTP1 params: {exc}") from exc


def save_params(path, p: TrackingParams, meta: dict | None = None) -> None:
    write_bytes_atomic(path, write_container(params_to_container(p, meta)))


def load_params(path) -> TrackingParams:
    return params_from_container(load_file(path, b"FTP1"))


def load_cameras(path) -> list[Camera]:
    """Camera blocks from any container that carries them (FTS1 or FTP1)."""
    return _cameras_from(load_file(path))


# ---------------------------------------------------------------- meshes


@dataclass
class MeshSequence:
    """F meshes sharing one topology; stored as FTM1 with a ``vertices`` chunk."""

    vertices: np.ndarray  # (F, N, 3)
    triangles: np.ndarray  # (M, 3)
    labels: np.ndarray | None = None  # (N,)
    keypoints: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim == 2:
            self.vertices = self.vertices[None]
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise FormatError("mesh vertices must be (N, 3) or (F, N, 3)")
        n = self.vertices.shape[1]
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise FormatError("triangles must be (M, 3)")
        if self.triangles.size and self.triangles.max() >= n:
            raise FormatError("triangle index out of range")
        if self.labels is not None and len(self.labels) != n:
            raise FormatError(f"region_labels has {len(self.labels)} entries for {n} vertices")
        if self.keypoints is not None and len(self.keypoints) and np.max(self.keypoints) >= n:
            raise FormatError("keypoint index out of range")

    @property
    def n_frames(self) -> int:
        return len(self.vertices)


def meshes_to_container(m: MeshSequence) -> Container:
    chunks = {"vertices": m.vertices, "triangles": m.triangles.astype(np.uint32)}
    if m.labels is not None:
        chunks["region_labels"] = np.asarray(m.labels, dtype=np.uint8)
    if m.keypoints is not None:
        chunks["keypoints"] = np.asarray(m.keypoints, dtype=np.uint32)
    return Container(b"FTM1", chunks)


def meshes_from_container(c: Container) -> MeshSequence:
    """Mesh sequence from FTM1; a model container yields its template as one frame."""
    if c.magic != b"FTM1":
        raise FormatError(f"expected an FTM1 mesh container, got {c.magic!r}")
    verts = c.chunks.get("vertices", c.chunks.get("template"))
    if verts is None:
        raise FormatError("FTM1 container has neither 'vertices' nor 'template'")
    labels = c.chunks.get("region_labels")
    kp = c.chunks.get("keypoints")
    return MeshSequence(
        verts.astype(np.float64),
        c.require("triangles").astype(np.int64),
        None if labels is None else labels.astype(np.uint8),
        None if kp is None else kp.astype(np.int64),
    )


def save_meshes(path, m: MeshSequence) -> None:
    write_bytes_atomic(path, write_container(meshes_to_container(m)))


def load_meshes(path) -> MeshSequence:
    return meshes_from_container(load_file(path, b"FTM1"))


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles from an ASCII OBJ; polygons are fan-triangulated."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed line {line!r}") from exc
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if not np.all(np.isfinite(v)):
        raise FormatError(f"{path}: non-finite vertex coordinates")
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise FormatError(f"{path}: face index out of range")
    return v, f


def obj_text(vertices: np.ndarray, triangles: np.ndarray) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles).tolist()]
    return "\n".join(lines) + "\n"
