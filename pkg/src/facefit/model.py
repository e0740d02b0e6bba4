"""Parametric head model: linear blendshapes, linear blend skinning, static deformations.

Public functions take and return numpy arrays. The ``*_t`` kernels operate on
float64 torch tensors and are what the energy uses so gradients flow through
the same code path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

_SMALL_ANGLE = 1e-7
ROOT = -1


class Region(enum.IntEnum):
    FACE = 0
    MOUTH = 1
    NOSE = 2
    EYES = 3
    EARS = 4
    OTHER = 5


REGION_NAMES = {r.name.lower(): r for r in Region}


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BlendshapeModel:
    template: np.ndarray  # (N, 3)
    identity_basis: np.ndarray  # (N, 3, B_id)
    expression_basis: np.ndarray  # (N, 3, B_ex)
    joint_regressor: np.ndarray  # (K, N)
    skin_weights: np.ndarray  # (N, K)
    joint_parents: np.ndarray  # (K,), ROOT for the root joint
    vertex_weights: np.ndarray  # (N,)
    region_labels: np.ndarray  # (N,) Region values
    uv_coords: np.ndarray  # (N, 2)
    triangles: np.ndarray  # (M, 3)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.template.shape[0]
        checks = [
            (self.template.shape == (n, 3), "template must be (N, 3)"),
            (self.identity_basis.ndim == 3 and self.identity_basis.shape[:2] == (n, 3), "identity_basis must be (N, 3, B_id)"),
            (self.expression_basis.ndim == 3 and self.expression_basis.shape[:2] == (n, 3), "expression_basis must be (N, 3, B_ex)"),
            (self.joint_regressor.ndim == 2 and self.joint_regressor.shape[1] == n, "joint_regressor must be (K, N)"),
            (self.skin_weights.shape == (n, self.joint_regressor.shape[0]), "skin_weights must be (N, K)"),
            (self.joint_parents.shape == (self.joint_regressor.shape[0],), "joint_parents must have K entries"),
            (self.vertex_weights.shape == (n,), "vertex_weights must be (N,)"),
            (self.region_labels.shape == (n,), "region_labels must be (N,)"),
            (self.uv_coords.shape == (n, 2), "uv_coords must be (N, 2)"),
            (self.triangles.ndim == 2 and self.triangles.shape[1] == 3, "triangles must be (M, 3)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ModelError(msg)
        for name in ("template", "identity_basis", "expression_basis", "joint_regressor", "skin_weights", "vertex_weights"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} has non-finite entries")
        w = self.skin_weights
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise ModelError("skin_weights rows must be non-negative and sum to 1")
        if np.any(self.vertex_weights <= 0):
            raise ModelError("vertex_weights must be positive")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ModelError("triangle indices out of range")
        _check_tree(self.joint_parents)
        for arr in vars(self).values():
            if isinstance(arr, np.ndarray):
                arr.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_identity(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def n_pose(self) -> int:
        return 3 * self.n_joints + 3

    def region_mask(self, names) -> np.ndarray:
        """Boolean per-vertex mask for the given region names."""
        codes = []
        for name in names:
            if name not in REGION_NAMES:
                raise ModelError(f"unknown region {name!r}; valid: {sorted(REGION_NAMES)}")
            codes.append(int(REGION_NAMES[name]))
        return np.isin(self.region_labels, codes)


def _check_tree(parents: np.ndarray) -> None:
    k = len(parents)
    roots = [i for i, p in enumerate(parents) if p == ROOT]
    if len(roots) != 1:
        raise ModelError(f"joint_parents must have exactly one root, found {len(roots)}")
    for i in range(k):
        seen = set()
        j = i
        while j != ROOT:
            if j in seen or not (0 <= j < k):
                raise ModelError("joint_parents must form an acyclic tree")
            seen.add(j)
            j = int(parents[j])


def topological_order(parents: np.ndarray) -> list[int]:
    order, placed = [], set()
    while len(order) < len(parents):
        for i, p in enumerate(parents):
            if i not in placed and (p == ROOT or int(p) in placed):
                order.append(i)
                placed.add(i)
    return order


@dataclass
class ModelParams:
    beta: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    delta_d: np.ndarray

    @classmethod
    def zeros(cls, model: BlendshapeModel) -> "ModelParams":
        return cls(
            np.zeros(model.n_identity),
            np.zeros(model.n_expression),
            np.zeros(model.n_pose),
            np.zeros((model.n_vertices, 3)),
        )


def _check_params(model: BlendshapeModel, beta, phi, theta, delta_d) -> None:
    expect = {
        "beta": (np.shape(beta), (model.n_identity,)),
        "phi": (np.shape(phi), (model.n_expression,)),
        "theta": (np.shape(theta), (model.n_pose,)),
        "delta_d": (np.shape(delta_d), (model.n_vertices, 3)),
    }
    for name, (got, want) in expect.items():
        if got != want:
            raise ModelError(f"{name} has shape {got}, model expects {want}")
    for name, val in zip(expect, (beta, phi, theta, delta_d)):
        if not np.all(np.isfinite(val)):
            raise ModelError(f"{name} has non-finite entries")


# ---------------------------------------------------------------- torch kernels


def rodrigues_t(omega: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    sq = (omega * omega).sum(-1)
    small = sq < _SMALL_ANGLE**2
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    ang = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(ang) / ang)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(ang)) / safe_sq)
    x, y, z = omega.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(omega.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=omega.dtype).expand_as(k)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def blendshape_t(template, identity_basis, expression_basis, beta, phi):
    """Rest vertices. ``phi`` may be (B_ex,) or (F, B_ex); output (N,3) or (F,N,3)."""
    shaped = template + identity_basis @ beta
    if phi.ndim == 1:
        return shaped + expression_basis @ phi
    n, _, k = expression_basis.shape
    return shaped + (phi @ expression_basis.reshape(n * 3, k).T).reshape(-1, n, 3)


def lbs_t(rest, theta, joint_regressor, skin_weights, parents, order):
    """Pose rest vertices (..., N, 3) with theta (..., 3K+3)."""
    k = joint_regressor.shape[0]
    joints = joint_regressor @ rest  # (..., K, 3)
    rot = rodrigues_t(theta[..., : 3 * k].reshape(theta.shape[:-1] + (k, 3)))
    world_r = [None] * k
    world_t = [None] * k
    for i in order:
        p = int(parents[i])
        if p == ROOT:
            world_r[i] = rot[..., i, :, :]
            world_t[i] = joints[..., i, :]
        else:
            offset = joints[..., i, :] - joints[..., p, :]
            world_r[i] = world_r[p] @ rot[..., i, :, :]
            world_t[i] = (world_r[p] @ offset.unsqueeze(-1)).squeeze(-1) + world_t[p]
    g_r = torch.stack(world_r, -3)  # (..., K, 3, 3)
    g_t = torch.stack(world_t, -2)  # (..., K, 3)
    # skinning transform maps rest point v to G_r (v - j_rest) + G_t
    skin_t = g_t - (g_r @ joints.unsqueeze(-1)).squeeze(-1)
    blend_r = torch.einsum("nk,...kab->...nab", skin_weights, g_r)
    blend_t = torch.einsum("nk,...ka->...na", skin_weights, skin_t)
    posed = (blend_r @ rest.unsqueeze(-1)).squeeze(-1) + blend_t
    return posed + theta[..., 3 * k :].unsqueeze(-2)


class TorchModel:
    """Tensor views of a model's arrays, cached per model instance."""

    def __init__(self, model: BlendshapeModel):
        as_t = lambda a: torch.from_numpy(np.array(a, dtype=np.float64))  # noqa: E731
        self.template = as_t(model.template)
        self.identity_basis = as_t(model.identity_basis)
        self.expression_basis = as_t(model.expression_basis)
        self.joint_regressor = as_t(model.joint_regressor)
        self.skin_weights = as_t(model.skin_weights)
        self.vertex_weights = as_t(model.vertex_weights)
        self.parents = [int(p) for p in model.joint_parents]
        self.order = topological_order(model.joint_parents)

    def rest(self, beta, phi):
        return blendshape_t(self.template, self.identity_basis, self.expression_basis, beta, phi)

    def pose(self, rest, theta):
        return lbs_t(rest, theta, self.joint_regressor, self.skin_weights, self.parents, self.order)


_TORCH_CACHE: "dict[int, tuple[BlendshapeModel, TorchModel]]" = {}


def torch_model(model: BlendshapeModel) -> TorchModel:
    hit = _TORCH_CACHE.get(id(model))
    if hit is None or hit[0] is not model:
        hit = (model, TorchModel(model))
        _TORCH_CACHE[id(model)] = hit
    return hit[1]


# ---------------------------------------------------------------- numpy API


def apply_lbs(rest: np.ndarray, model: BlendshapeModel, theta: np.ndarray) -> np.ndarray:
    """Pose ``rest`` (N, 3) by linear blend skinning; zero theta is the identity map."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.n_pose,):
        raise ModelError(f"theta has shape {theta.shape}, model expects ({model.n_pose},)")
    if rest.shape != (model.n_vertices, 3):
        raise ModelError(f"rest has shape {rest.shape}, model expects ({model.n_vertices}, 3)")
    if not np.any(theta):
        return np.array(rest, dtype=np.float64)
    tm = torch_model(model)
    with torch.no_grad():
        return tm.pose(torch.from_numpy(np.array(rest, dtype=np.float64)), torch.from_numpy(theta)).numpy()


def evaluate_model(model: BlendshapeModel, params: ModelParams) -> np.ndarray:
    """Local-space vertices: blendshapes, then skinning, then the static deformation."""
    _check_params(model, params.beta, params.phi, params.theta, params.delta_d)
    rest = model.template + model.identity_basis @ np.asarray(params.beta, dtype=np.float64)
    rest = rest + model.expression_basis @ np.asarray(params.phi, dtype=np.float64)
    return apply_lbs(rest, model, params.theta) + params.delta_d


def neutral_vertices(model: BlendshapeModel, beta: np.ndarray, delta_d: np.ndarray) -> np.ndarray:
    return evaluate_model(
        model,
        ModelParams(beta, np.zeros(model.n_expression), np.zeros(model.n_pose), delta_d),
    )
