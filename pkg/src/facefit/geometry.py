"""Rigid transforms and pinhole projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import rodrigues_t

EPS_DEPTH = 1e-6


def rodrigues(omega) -> np.ndarray:
    """Axis-angle to rotation matrix, series-expanded near zero."""
    omega = np.asarray(omega, dtype=np.float64)
    with torch.no_grad():
        return rodrigues_t(torch.from_numpy(omega.copy())).numpy()


def log_rotation(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to axis-angle (inverse of :func:`rodrigues`)."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(r).as_rotvec()


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # axis-angle, radians
    translation: np.ndarray  # meters

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, r: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return cls(log_rotation(r), np.asarray(t, dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        return rodrigues(self.rotation)

    def inverse(self) -> "RigidTransform":
        r = self.matrix
        return RigidTransform(-np.asarray(self.rotation, dtype=np.float64), -r.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        r = self.matrix
        return RigidTransform.from_matrix(r @ other.matrix, r @ other.translation + self.translation)


def transform_points(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(t.rotation)) and np.all(np.isfinite(t.translation))):
        raise ValueError("transform_points: non-finite input")
    return pts @ t.matrix.T + t.translation


@dataclass(frozen=True)
class Camera:
    extrinsics: RigidTransform  # world -> camera
    focal: float
    principal_point: np.ndarray
    image_size: tuple[int, int]  # (width, height)
    calibrated: bool = True

    def __post_init__(self):
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        pp = np.asarray(self.principal_point, dtype=np.float64)
        if not (0 <= pp[0] <= w and 0 <= pp[1] <= h):
            raise ValueError("principal point outside the image")

    @classmethod
    def centered(cls, extrinsics: RigidTransform, focal: float, image_size, calibrated: bool = True) -> "Camera":
        w, h = image_size
        return cls(extrinsics, float(focal), np.array([w / 2.0, h / 2.0]), (int(w), int(h)), calibrated)


def project(cam: Camera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points; returns (pixels (N,2), depth (N,), valid (N,))."""
    p = transform_points(cam.extrinsics, pts)
    depth = p[..., 2]
    valid = depth > EPS_DEPTH
    z = np.where(valid, depth, 1.0)
    pix = cam.focal * p[..., :2] / z[..., None] + np.asarray(cam.principal_point, dtype=np.float64)
    pix = np.where(valid[..., None], pix, np.nan)
    return pix, depth, valid
