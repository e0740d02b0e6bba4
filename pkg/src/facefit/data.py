"""Tracking parameters, alignment observations and sequence datasets."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .geometry import Camera, RigidTransform
from .model import BlendshapeModel

# optimizable groups, in canonical order
GROUPS = (
    "beta",
    "phi",
    "theta",
    "delta_d",
    "head_rotation",
    "head_translation",
    "cam_rotation",
    "cam_translation",
    "cam_focal",
)
CAMERA_GROUPS = ("cam_rotation", "cam_translation", "cam_focal")


class DataError(ValueError):
    pass


@dataclass
class TrackingParams:
    beta: np.ndarray  # (B_id,)
    phi: np.ndarray  # (F, B_ex)
    theta: np.ndarray  # (F, 3K+3)
    delta_d: np.ndarray  # (N, 3)
    head_rotation: np.ndarray  # (F, 3) axis-angle
    head_translation: np.ndarray  # (F, 3)
    cam_rotation: np.ndarray  # (C, 3) world -> camera
    cam_translation: np.ndarray  # (C, 3)
    cam_focal: np.ndarray  # (C,)
    cam_principal: np.ndarray  # (C, 2)
    cam_image_size: np.ndarray  # (C, 2) width, height
    cam_calibrated: np.ndarray  # (C,) bool

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            dtype = bool if f.name == "cam_calibrated" else (np.int64 if f.name == "cam_image_size" else np.float64)
            setattr(self, f.name, np.array(val, dtype=dtype))
        f_, c = self.n_frames, self.n_cameras
        if f_ < 1 or c < 1:
            raise DataError("need at least one frame and one camera")
        for name in ("phi", "theta", "head_rotation", "head_translation"):
            if getattr(self, name).shape[0] != f_:
                raise DataError(f"{name} has {getattr(self, name).shape[0]} frames, expected {f_}")
        for name in ("cam_rotation", "cam_translation", "cam_focal", "cam_principal", "cam_image_size", "cam_calibrated"):
            if getattr(self, name).shape[0] != c:
                raise DataError(f"{name} has {getattr(self, name).shape[0]} cameras, expected {c}")
        for name in GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} has non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.phi.shape[0]

    @property
    def n_cameras(self) -> int:
        return self.cam_focal.shape[0]

    @classmethod
    def initial(cls, model: BlendshapeModel, n_frames: int, cameras: list[Camera]) -> "TrackingParams":
        """Zero shape/expression, identity head pose, the given cameras."""
        return cls(
            beta=np.zeros(model.n_identity),
            phi=np.zeros((n_frames, model.n_expression)),
            theta=np.zeros((n_frames, model.n_pose)),
            delta_d=np.zeros((model.n_vertices, 3)),
            head_rotation=np.zeros((n_frames, 3)),
            head_translation=np.zeros((n_frames, 3)),
            **camera_arrays(cameras),
        )

    def copy(self) -> "TrackingParams":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def head_pose(self, t: int) -> RigidTransform:
        return RigidTransform(self.head_rotation[t], self.head_translation[t])

    @property
    def cameras(self) -> list[Camera]:
        return [
            Camera(
                RigidTransform(self.cam_rotation[j], self.cam_translation[j]),
                float(self.cam_focal[j]),
                self.cam_principal[j],
                (int(self.cam_image_size[j, 0]), int(self.cam_image_size[j, 1])),
                bool(self.cam_calibrated[j]),
            )
            for j in range(self.n_cameras)
        ]

    def with_cameras(self, cameras: list[Camera]) -> "TrackingParams":
        return replace(self.copy(), **camera_arrays(cameras))

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def camera_arrays(cameras: list[Camera]) -> dict[str, np.ndarray]:
    return {
        "cam_rotation": np.array([c.extrinsics.rotation for c in cameras], dtype=np.float64).reshape(-1, 3),
        "cam_translation": np.array([c.extrinsics.translation for c in cameras], dtype=np.float64).reshape(-1, 3),
        "cam_focal": np.array([c.focal for c in cameras], dtype=np.float64),
        "cam_principal": np.array([c.principal_point for c in cameras], dtype=np.float64).reshape(-1, 2),
        "cam_image_size": np.array([c.image_size for c in cameras], dtype=np.int64).reshape(-1, 2),
        "cam_calibrated": np.array([c.calibrated for c in cameras], dtype=bool),
    }


@dataclass(frozen=True)
class AlignmentObservation:
    vertex_index: int
    camera_index: int
    frame_index: int
    mu: np.ndarray
    sigma: float


class Observations:
    """Struct-of-arrays alignment observations, stored in canonical (frame, camera, vertex) order."""

    def __init__(self, vertex, camera, frame, mu, sigma):
        vertex = np.asarray(vertex, dtype=np.int64).reshape(-1)
        camera = np.asarray(camera, dtype=np.int64).reshape(-1)
        frame = np.asarray(frame, dtype=np.int64).reshape(-1)
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
        sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
        m = len(vertex)
        if not (len(camera) == len(frame) == len(mu) == len(sigma) == m):
            raise DataError("observation arrays have inconsistent lengths")
        if not np.all(np.isfinite(mu)):
            raise DataError("observation mu has non-finite entries")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise DataError("observation sigma must be finite and > 0")
        order = np.lexsort((sigma, mu[:, 1], mu[:, 0], vertex, camera, frame))
        self.vertex = vertex[order]
        self.camera = camera[order]
        self.frame = frame[order]
        self.mu = mu[order]
        self.sigma = sigma[order]
        for a in (self.vertex, self.camera, self.frame, self.mu, self.sigma):
            a.flags.writeable = False

    def __len__(self) -> int:
        return len(self.vertex)

    def __getitem__(self, k: int) -> AlignmentObservation:
        return AlignmentObservation(int(self.vertex[k]), int(self.camera[k]), int(self.frame[k]), self.mu[k].copy(), float(self.sigma[k]))

    def check_indices(self, n_vertices: int, n_cameras: int, n_frames: int) -> None:
        for name, arr, hi in (("vertex", self.vertex, n_vertices), ("camera", self.camera, n_cameras), ("frame", self.frame, n_frames)):
            if len(arr) and (arr.min() < 0 or arr.max() >= hi):
                raise DataError(f"observation {name} index out of range [0, {hi})")

    def subset(self, mask: np.ndarray) -> "Observations":
        return Observations(self.vertex[mask], self.camera[mask], self.frame[mask], self.mu[mask], self.sigma[mask])

    def with_sigma(self, sigma) -> "Observations":
        return Observations(self.vertex, self.camera, self.frame, self.mu, np.broadcast_to(sigma, self.sigma.shape))


@dataclass
class SequenceDataset:
    cameras: list[Camera]
    n_frames: int
    n_vertices: int
    observations: Observations
    mica_template: np.ndarray | None = None  # (N, 3)
    gt_vertices: np.ndarray | None = None  # (F, N, 3) world space
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_frames < 1 or not self.cameras:
            raise DataError("dataset needs at least one frame and one camera")
        self.observations.check_indices(self.n_vertices, len(self.cameras), self.n_frames)
        if self.mica_template is not None and np.shape(self.mica_template) != (self.n_vertices, 3):
            raise DataError(f"mica_template has shape {np.shape(self.mica_template)}, expected ({self.n_vertices}, 3)")
        if self.gt_vertices is not None and np.shape(self.gt_vertices)[:2] != (self.n_frames, self.n_vertices):
            raise DataError("gt_vertices must be (F, N, 3)")

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)
