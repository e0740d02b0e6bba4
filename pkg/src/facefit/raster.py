"""Z-buffered triangle rasterization with barycentric interpolation.

Pixel (x, y) covers [x, x+1) x [y, y+1); samples are taken at pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import EPS_DEPTH

NO_LABEL = 255


@dataclass(frozen=True)
class ScreenMesh:
    positions: np.ndarray  # (N, 2) pixels
    depths: np.ndarray  # (N,)
    triangles: np.ndarray  # (M, 3)
    labels: np.ndarray | None = None  # (N,) region codes

    def __post_init__(self):
        n = len(self.positions)
        if self.positions.shape != (n, 2) or self.depths.shape != (n,):
            raise ValueError("positions must be (N, 2) and depths (N,)")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle indices out of range")
        if not np.all(np.isfinite(self.depths)):
            raise ValueError("depths must be finite")

    def shifted(self, offset) -> "ScreenMesh":
        return ScreenMesh(self.positions + np.asarray(offset, dtype=np.float64), self.depths, self.triangles, self.labels)

    @property
    def valid(self) -> np.ndarray:
        return (self.depths > EPS_DEPTH) & np.all(np.isfinite(self.positions), axis=1)


@dataclass(frozen=True)
class Coverage:
    """Front-most triangle and barycentrics for every covered pixel."""

    width: int
    height: int
    pixels: np.ndarray  # (P,) flat pixel index y * width + x
    tri: np.ndarray  # (P,)
    bary: np.ndarray  # (P, 3)

    def centres(self) -> np.ndarray:
        y, x = np.divmod(self.pixels, self.width)
        return np.stack([x + 0.5, y + 0.5], axis=1)


def rasterize(mesh: ScreenMesh, width: int, height: int) -> Coverage:
    zbuf = np.full(height * width, np.inf)
    tri_id = np.full(height * width, -1, dtype=np.int64)
    bary = np.zeros((height * width, 3))
    pos, depth = mesh.positions, mesh.depths
    ok = mesh.valid
    for k, (a, b, c) in enumerate(np.asarray(mesh.triangles)):
        if not (ok[a] and ok[b] and ok[c]):
            continue
        pa, pb, pc = pos[a], pos[b], pos[c]
        area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if abs(area) < 1e-12:
            continue
        lo = np.floor(np.minimum(np.minimum(pa, pb), pc) - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(pa, pb), pc) - 0.5).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], width - 1), min(hi[1], height - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
        wa = ((pb[0] - px) * (pc[1] - py) - (pb[1] - py) * (pc[0] - px)) / area
        wb = ((pc[0] - px) * (pa[1] - py) - (pc[1] - py) * (pa[0] - px)) / area
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        if not inside.any():
            continue
        flat = (ys.ravel() * width + xs.ravel())[inside]
        w = np.stack([wa[inside], wb[inside], wc[inside]], axis=1)
        z = w @ np.array([depth[a], depth[b], depth[c]])
        nearer = z < zbuf[flat]
        flat = flat[nearer]
        zbuf[flat] = z[nearer]
        tri_id[flat] = k
        bary[flat] = w[nearer]
    covered = np.flatnonzero(tri_id >= 0)
    return Coverage(width, height, covered, tri_id[covered], bary[covered])


@dataclass(frozen=True)
class FlowField:
    width: int
    height: int
    flow: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W) bool
    labels: np.ndarray  # (H, W) uint8, NO_LABEL where uncovered


def _pixel_labels(cov: Coverage, tris: np.ndarray, labels: np.ndarray | None) -> np.ndarray:
    if labels is None:
        return np.full(len(cov.pixels), NO_LABEL, dtype=np.uint8)
    vl = labels[tris]  # (P, 3)
    # majority of the three vertex labels; with no majority, the vertex nearest the sample
    out = vl[np.arange(len(vl)), np.argmax(cov.bary, axis=1)]
    maj_ab = vl[:, 0] == vl[:, 1]
    out = np.where(maj_ab, vl[:, 0], out)
    out = np.where(~maj_ab & ((vl[:, 2] == vl[:, 0]) | (vl[:, 2] == vl[:, 1])), vl[:, 2], out)
    return out.astype(np.uint8)


def flow_from_coverage(cov: Coverage, mesh_t: ScreenMesh, mesh_th: ScreenMesh) -> FlowField:
    """Flow of each covered pixel of ``mesh_t`` to where its surface point lies in ``mesh_th``."""
    if len(mesh_th.positions) != len(mesh_t.positions):
        raise ValueError("meshes must share topology")
    tris = np.asarray(mesh_t.triangles)[cov.tri]
    # interpolated vertex displacement; equals target position minus pixel centre because
    # the barycentrics reproduce the centre, but stays exact for static or translated meshes
    motion = np.einsum("pk,pkc->pc", cov.bary, mesh_th.positions[tris] - mesh_t.positions[tris])
    ok = np.all(mesh_th.valid[tris], axis=1)
    h, w = cov.height, cov.width
    flow = np.zeros((h * w, 2))
    valid = np.zeros(h * w, dtype=bool)
    labels = np.full(h * w, NO_LABEL, dtype=np.uint8)
    flow[cov.pixels] = np.where(ok[:, None], motion, 0.0)
    valid[cov.pixels] = ok
    labels[cov.pixels] = _pixel_labels(cov, tris, mesh_t.labels)
    return FlowField(w, h, flow.reshape(h, w, 2), valid.reshape(h, w), labels.reshape(h, w))


def rasterize_flow(mesh_t: ScreenMesh, mesh_th: ScreenMesh, width: int, height: int) -> FlowField:
    return flow_from_coverage(rasterize(mesh_t, width, height), mesh_t, mesh_th)
