"""3D reconstruction error: keypoint Procrustes, ICP refinement, scan-to-mesh distance per region."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bvh import MeshBVH
from .geometry import RigidTransform, transform_points
from .io import FormatError, load_meshes, read_obj
from .model import REGION_NAMES
from .ssme import REGION_SETS


class AlignmentError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) meters
    triangles: np.ndarray  # (M, 3)
    labels: np.ndarray | None = None  # (N,) region codes
    keypoints: np.ndarray | None = None  # (7,) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle indices out of range")
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=np.int64)
            if self.keypoints.min() < 0 or self.keypoints.max() >= n:
                raise ValueError("keypoint indices out of range")

    def transformed(self, t: RigidTransform, scale: float = 1.0) -> "TriangleMesh":
        return TriangleMesh(transform_points(t, scale * self.vertices), self.triangles, self.labels, self.keypoints)


@dataclass(frozen=True)
class Similarity:
    """Rigid transform with an optional uniform scale applied first."""

    rigid: RigidTransform
    scale: float = 1.0

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return transform_points(self.rigid, self.scale * np.asarray(pts, dtype=np.float64))


def procrustes_rigid(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> Similarity:
    """Least-squares R, t (and s if requested) minimizing sum |s R src + t - dst|^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise AlignmentError("src and dst must both be (K, 3)")
    if len(src) < 3:
        raise AlignmentError("need at least 3 correspondences")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - ms, dst - md
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise AlignmentError("keypoints are collinear or coincident")
    u, s, vt = np.linalg.svd(xd.T @ xs)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = (u * d) @ vt
    scale = float((s * d).sum() / (xs**2).sum()) if with_scale else 1.0
    t = md - scale * r @ ms
    return Similarity(RigidTransform.from_matrix(r, t), scale)


@dataclass
class IcpResult:
    transform: Similarity
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)  # RMS closest-point distance per iterate


def icp_refine(
    src: np.ndarray,
    dst: "TriangleMesh | MeshBVH",
    init: Similarity | RigidTransform | None = None,
    max_iters: int = 50,
    tol: float = 1e-7,
    with_scale: bool = False,
    accelerate: bool = True,
) -> IcpResult:
    """Point-to-surface ICP of ``src`` points onto ``dst``.

    Progress is measured by the RMS closest-point distance, which never
    increases. Stops when an iteration improves it by less than ``tol`` (m),
    keeping the previous iterate. Plain Procrustes updates crawl when the
    remaining error is a slide along a smooth surface; with ``accelerate`` a
    linearized point-to-plane step is also tried and kept when it lowers the RMS.
    """
    bvh = dst if isinstance(dst, MeshBVH) else MeshBVH(dst.vertices, dst.triangles)
    src = np.asarray(src, dtype=np.float64)
    if init is None:
        init = Similarity(RigidTransform.identity())
    elif isinstance(init, RigidTransform):
        init = Similarity(init)
    normals = _face_normals(bvh.vertices, bvh.triangles) if accelerate else None

    def measure(s: Similarity):
        moved = s.apply(src)
        d, cp, tri = bvh.query(moved)
        return float(np.sqrt(np.mean(d**2))), moved, cp, tri

    current = init
    rms, moved, closest, tri = measure(current)
    history = [rms]
    for it in range(1, max_iters + 1):
        candidate = procrustes_rigid(src, closest, with_scale)
        found = measure(candidate)
        if accelerate:
            step = _point_to_plane_step(moved, closest, normals[tri])
            if step is not None:
                gn = Similarity(step.compose(current.rigid), current.scale)
                found_gn = measure(gn)
                if found_gn[0] < found[0]:
                    candidate, found = gn, found_gn
        if rms - found[0] < tol:
            return IcpResult(current, it, True, history)
        current = candidate
        rms, moved, closest, tri = found
        history.append(rms)
    return IcpResult(current, max_iters, False, history)


def _face_normals(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def _point_to_plane_step(x: np.ndarray, q: np.ndarray, n: np.ndarray) -> RigidTransform | None:
    """Small rigid motion minimizing the linearized sum of (n . (x' - q))^2."""
    jac = np.hstack([np.cross(x, n), n])
    res = -np.einsum("ij,ij->i", n, x - q)
    sol, _, rank, _ = np.linalg.lstsq(jac, res, rcond=1e-12)
    if rank < 6 or not np.all(np.isfinite(sol)):
        return None
    return RigidTransform(sol[:3], sol[3:])


def point_to_mesh_distance(p: np.ndarray, mesh: "TriangleMesh | MeshBVH") -> tuple[float, np.ndarray]:
    bvh = mesh if isinstance(mesh, MeshBVH) else MeshBVH(mesh.vertices, mesh.triangles)
    d, cp, _ = bvh.query(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return float(d[0]), cp[0]


@dataclass(frozen=True)
class DistanceStats:
    median: float  # mm
    mean: float
    std: float
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


def _stats(d_m: np.ndarray) -> DistanceStats:
    if not len(d_m):
        return DistanceStats(math.nan, math.nan, math.nan, 0)
    mm = np.sort(d_m) * 1000.0
    return DistanceStats(float(np.median(mm)), float(mm.mean()), float(mm.std()), len(mm))


def chamfer_scan_to_mesh(gt: TriangleMesh, pred: TriangleMesh, regions=None, symmetric: bool = False) -> dict[str, DistanceStats]:
    """Distance of every ground-truth vertex to the predicted surface, summarized per region (mm).

    With ``symmetric`` the predicted-to-ground-truth distances are pooled in as
    well (region split still by ground-truth labels, so only "all" changes).
    """
    d = MeshBVH(pred.vertices, pred.triangles).query(gt.vertices)[0]
    out = {"all": _stats(d if not symmetric else np.concatenate([d, MeshBVH(gt.vertices, gt.triangles).query(pred.vertices)[0]]))}
    if regions is None:
        regions = tuple(REGION_SETS) if gt.labels is not None else ()
    for r in regions:
        if gt.labels is None:
            raise ValueError("region statistics need ground-truth vertex labels")
        codes = [int(c) for c in REGION_SETS[r]]
        out[r] = _stats(d[np.isin(gt.labels, codes)])
    return out


@dataclass
class ReconResult:
    stats: dict[str, DistanceStats]
    alignment: Similarity
    icp: IcpResult


def evaluate_reconstruction(
    gt: TriangleMesh,
    pred: TriangleMesh,
    regions=None,
    with_scale: bool = False,
    symmetric: bool = False,
    max_iters: int = 50,
    tol: float = 1e-7,
) -> ReconResult:
    """Align ``pred`` to ``gt`` by 7-keypoint Procrustes then ICP, and measure scan-to-mesh distance."""
    if gt.keypoints is None or pred.keypoints is None:
        raise AlignmentError("both meshes need keypoints")
    if len(gt.keypoints) != len(pred.keypoints):
        raise AlignmentError("keypoint counts differ")
    init = procrustes_rigid(pred.vertices[pred.keypoints], gt.vertices[gt.keypoints], with_scale)
    icp = icp_refine(pred.vertices, MeshBVH(gt.vertices, gt.triangles), init, max_iters, tol, with_scale)
    aligned = TriangleMesh(icp.transform.apply(pred.vertices), pred.triangles, pred.labels, pred.keypoints)
    return ReconResult(chamfer_scan_to_mesh(gt, aligned, regions, symmetric), icp.transform, icp)


def stats_csv(stats: dict[str, DistanceStats]) -> str:
    lines = ["region,median_mm,mean_mm,std_mm,count"]
    for name, s in stats.items():
        vals = ["nan" if not math.isfinite(v) else f"{v:.9g}" for v in (s.median, s.mean, s.std)]
        lines.append(",".join([name, *vals, str(s.count)]))
    return "\n".join(lines) + "\n"


def load_sidecar(path, n_vertices: int, role: str | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Keypoints and optional per-vertex labels from a JSON sidecar.

    ``{"keypoints": [7 ints], "regions": {"nose": [indices], ...}}``; vertices
    not listed in any region are labelled "other". A sidecar may instead hold
    one such block per mesh under ``"gt"`` and ``"pred"``; ``role`` picks one.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if role is not None and isinstance(doc, dict) and role in doc:
        doc = doc[role]
    if not isinstance(doc, dict) or "keypoints" not in doc:
        raise FormatError(f"{path}: missing 'keypoints'")
    kp = np.asarray(doc["keypoints"], dtype=np.int64)
    if kp.ndim != 1 or (kp.size and (kp.min() < 0 or kp.max() >= n_vertices)):
        raise FormatError(f"{path}: keypoints must be vertex indices below {n_vertices}")
    labels = None
    if "regions" in doc:
        labels = np.full(n_vertices, int(REGION_NAMES["other"]), dtype=np.uint8)
        for name, idx in doc["regions"].items():
            if name not in REGION_NAMES:
                raise FormatError(f"{path}: unknown region {name!r}")
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n_vertices):
                raise FormatError(f"{path}: region {name!r} index out of range")
            labels[idx] = int(REGION_NAMES[name])
    return kp, labels


def load_mesh(path, sidecar=None, role: str | None = None) -> TriangleMesh:
    """Single mesh from OBJ or FTM1; sidecar keypoints/regions override stored ones."""
    if Path(path).suffix.lower() == ".obj":
        v, f = read_obj(path)
        kp = labels = None
    else:
        m = load_meshes(path)
        if m.n_frames != 1:
            raise FormatError(f"{path}: expected one mesh, found {m.n_frames} frames")
        v, f, labels, kp = m.vertices[0], m.triangles, m.labels, m.keypoints
    if sidecar is not None:
        kp, side_labels = load_sidecar(sidecar, len(v), role)
        labels = side_labels if side_labels is not None else labels
    return TriangleMesh(v, f, labels, kp)
