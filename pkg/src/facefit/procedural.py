"""Procedurally generated head models for tests and benchmarks.

The default is a 162-vertex head (8 identity bases, 6 expression bases,
2 joints). ``make_head_model(n_vertices=5023, n_identity=300,
n_expression=100, n_joints=5)`` produces a full-size stand-in with the same
structure.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .model import ROOT, BlendshapeModel, Region

HEAD_RADII = np.array([0.08, 0.105, 0.095])

# (name, rest position, parent); the first K entries are used
_JOINTS = [
    ("root", (0.0, -0.10, -0.01), ROOT),
    ("jaw", (0.0, -0.035, 0.03), 0),
    ("neck", (0.0, -0.06, -0.01), 0),
    ("eye_l", (-0.032, 0.025, 0.075), 2),
    ("eye_r", (0.032, 0.025, 0.075), 2),
]
# (region, direction on the unit head, angular radius)
_REGION_SPOTS = [
    (Region.NOSE, (0.0, -0.05, 1.0), 0.28),
    (Region.EYES, (-0.38, 0.28, 0.88), 0.26),
    (Region.EYES, (0.38, 0.28, 0.88), 0.26),
    (Region.MOUTH, (0.0, -0.55, 0.83), 0.4),
]


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def _outward_triangles(points: np.ndarray) -> np.ndarray:
    tris = ConvexHull(points).simplices.astype(np.int64)
    a, b, c = points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _labels(dirs: np.ndarray) -> np.ndarray:
    labels = np.full(len(dirs), int(Region.OTHER), dtype=np.uint8)
    labels[dirs[:, 2] > 0.35] = Region.FACE
    labels[(np.abs(dirs[:, 0]) > 0.8) & (np.abs(dirs[:, 1]) < 0.4)] = Region.EARS
    for region, centre, radius in _REGION_SPOTS:
        c = np.asarray(centre) / np.linalg.norm(centre)
        labels[np.arccos(np.clip(dirs @ c, -1, 1)) < radius] = region
    return labels


def _bump_fields(rng, verts, normals, count, amplitude, weight=None, bumps=3):
    """``count`` smooth displacement fields built from Gaussian bumps, shape (N, 3, count)."""
    n = len(verts)
    out = np.zeros((n, 3, count))
    pool = np.arange(n) if weight is None else np.flatnonzero(weight > 0.2)
    for k in range(count):
        field = np.zeros((n, 3))
        for _ in range(bumps):
            centre = verts[rng.choice(pool)]
            width = rng.uniform(0.02, 0.045)
            g = np.exp(-np.sum((verts - centre) ** 2, axis=1) / (2 * width**2))
            direction = normals * rng.normal() + 0.3 * rng.normal(size=3)
            field += g[:, None] * direction
        if weight is not None:
            field *= weight[:, None]
        field *= amplitude / np.sqrt(np.mean(np.sum(field**2, axis=1)))
        out[:, :, k] = field
    return out


def make_head_model(
    n_vertices: int = 162,
    n_identity: int = 8,
    n_expression: int = 6,
    n_joints: int = 2,
    seed: int = 0,
    weight_high: float = 1.0,
    weight_low: float = 0.005,
) -> BlendshapeModel:
    if not 1 <= n_joints <= len(_JOINTS):
        raise ValueError(f"n_joints must be in 1..{len(_JOINTS)}")
    rng = np.random.default_rng(seed)
    dirs = fibonacci_sphere(n_vertices)
    triangles = _outward_triangles(dirs)

    # nose bump, slightly flattened back of the head
    nose_dir = np.array([0.0, -0.05, 1.0]) / np.linalg.norm([0.0, -0.05, 1.0])
    radial = 1.0 + 0.22 * np.exp(-np.arccos(np.clip(dirs @ nose_dir, -1, 1)) ** 2 / (2 * 0.12**2))
    radial -= 0.06 * np.clip(-dirs[:, 2], 0, None) ** 2
    template = dirs * radial[:, None] * HEAD_RADII

    normals = dirs / HEAD_RADII
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    labels = _labels(dirs)

    lower_face = 1.0 / (1.0 + np.exp((dirs[:, 1] + 0.15) / 0.12)) * np.clip(dirs[:, 2] + 0.3, 0, None)
    expr_weight = np.clip(lower_face + np.isin(labels, [Region.EYES]) * 0.8, 0, 1)
    identity = _bump_fields(rng, template, normals, n_identity, amplitude=0.006)
    expression = _bump_fields(rng, template, normals, n_expression, amplitude=0.004, weight=expr_weight)

    anchors = np.array([j[1] for j in _JOINTS[:n_joints]])
    parents = np.array([j[2] for j in _JOINTS[:n_joints]], dtype=np.int64)
    regressor = np.zeros((n_joints, n_vertices))
    for k, a in enumerate(anchors):
        # convex weights over the 6 nearest vertices
        d = np.linalg.norm(template - a, axis=1)
        near = np.argsort(d)[:6]
        w = 1.0 / (d[near] + 1e-3)
        regressor[k, near] = w / w.sum()

    skin = np.zeros((n_vertices, n_joints))
    skin[:, 0] = 1.0
    if n_joints > 1:
        skin[:, 1] = 4.0 * lower_face
    if n_joints > 2:
        skin[:, 2] = 2.0 * np.clip(dirs[:, 1] + 0.5, 0, None)
    for k in range(3, n_joints):
        skin[:, k] = 3.0 * np.exp(-np.sum((template - anchors[k]) ** 2, axis=1) / (2 * 0.015**2))
    skin /= skin.sum(axis=1, keepdims=True)

    high = np.isin(labels, [Region.FACE, Region.MOUTH, Region.NOSE, Region.EYES, Region.EARS])
    vertex_weights = np.where(high, weight_high, weight_low)
    uv = np.stack([(np.arctan2(dirs[:, 0], dirs[:, 2]) / (2 * np.pi)) + 0.5, (dirs[:, 1] + 1) / 2], axis=1)

    return BlendshapeModel(
        template=template,
        identity_basis=identity,
        expression_basis=expression,
        joint_regressor=regressor,
        skin_weights=skin,
        joint_parents=parents,
        vertex_weights=vertex_weights,
        region_labels=labels,
        uv_coords=uv,
        triangles=triangles,
    )


def keypoint_indices(model: BlendshapeModel) -> np.ndarray:
    """Seven well-spread landmark vertices: four eye corners, nose tip, two mouth corners."""
    targets = np.array(
        [
            (-0.05, 0.03, 0.07),
            (-0.015, 0.03, 0.09),
            (0.015, 0.03, 0.09),
            (0.05, 0.03, 0.07),
            (0.0, -0.005, 0.12),
            (-0.03, -0.05, 0.08),
            (0.03, -0.05, 0.08),
        ]
    )
    d = np.linalg.norm(model.template[None, :, :] - targets[:, None, :], axis=2)
    out = []
    for row in d:
        for idx in np.argsort(row):
            if idx not in out:
                out.append(int(idx))
                break
    return np.array(out, dtype=np.int64)
