"""Exact point-to-triangle-mesh distance with an axis-aligned bounding-volume hierarchy."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

LEAF_SIZE = 4


def _dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _closest_on_segment(p, a, b):
    ab = b - a
    denom = _dot(ab, ab)
    t = np.where(denom > 0, _dot(p - a, ab) / np.where(denom > 0, denom, 1.0), 0.0)
    return a + np.clip(t, 0.0, 1.0)[:, None] * ab


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closest points and squared distances, one triangle per query row (all (P, 3))."""
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    cond = [in_a, in_b, on_ab, in_c, on_ac, on_bc]
    choice = [
        a,
        b,
        a + t_ab[:, None] * ab,
        c,
        a + t_ac[:, None] * ac,
        b + t_bc[:, None] * (c - b),
    ]
    interior = a + v_in[:, None] * ab + w_in[:, None] * ac
    q = np.select([np.repeat(m[:, None], 3, axis=1) for m in cond], choice, default=interior)
    bad = ~np.all(np.isfinite(q), axis=1)
    if bad.any():
        # degenerate triangles: nearest of the three edges
        pb_, ab_, bb_, cb_ = p[bad], a[bad], b[bad], c[bad]
        cands = [_closest_on_segment(pb_, ab_, bb_), _closest_on_segment(pb_, bb_, cb_), _closest_on_segment(pb_, cb_, ab_)]
        d = np.stack([_dot(pb_ - x, pb_ - x) for x in cands], axis=1)
        q[bad] = np.stack(cands, axis=1)[np.arange(len(d)), np.argmin(d, axis=1)]
    diff = p - q
    return q, _dot(diff, diff)


class MeshBVH:
    """Immutable BVH over a triangle mesh; safe to share between threads."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if not len(self.triangles):
            raise ValueError("mesh has no triangles")
        corners = self.vertices[self.triangles]  # (M, 3, 3)
        tmin, tmax = corners.min(axis=1), corners.max(axis=1)
        centroid = corners.mean(axis=1)
        bmin, bmax, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(self.triangles))
        stack = [(0, len(order), -1, False)]
        while stack:
            lo, hi, parent, is_right = stack.pop()
            node = len(bmin)
            idx = order[lo:hi]
            bmin.append(tmin[idx].min(axis=0))
            bmax.append(tmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(lo)
            count.append(hi - lo)
            if parent >= 0:
                (right if is_right else left)[parent] = node
            if hi - lo <= leaf_size:
                continue
            cen = centroid[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            srt = idx[np.argsort(cen[:, axis], kind="stable")]
            order[lo:hi] = srt
            mid = (lo + hi) // 2
            stack.append((mid, hi, node, True))
            stack.append((lo, mid, node, False))
        self.order = order
        self.bmin, self.bmax = np.array(bmin), np.array(bmax)
        self.left, self.right = np.array(left), np.array(right)
        self.start, self.count = np.array(start), np.array(count)
        used = np.unique(self.triangles)
        self._used = used
        self._kd = cKDTree(self.vertices[used])

    def _tri_query(self, q_idx, t_idx, points):
        t = self.triangles[t_idx]
        return closest_point_on_triangles(points[q_idx], self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]])

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(distances, closest points, triangle indices) for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        # any mesh vertex bounds the distance from above
        d_v, _ = self._kd.query(points)
        bound = d_v**2 * (1 + 1e-9) + 1e-300
        best = np.full(n, np.inf)
        best_tri = np.full(n, np.iinfo(np.int64).max)
        best_pt = np.zeros((n, 3))
        q = np.arange(n)
        nodes = np.zeros(n, dtype=np.int64)
        while len(q):
            p = points[q]
            gap = np.maximum(self.bmin[nodes] - p, 0.0) + np.maximum(p - self.bmax[nodes], 0.0)
            box = _dot(gap, gap)
            keep = box <= bound[q] * (1 + 1e-12)
            q, nodes = q[keep], nodes[keep]
            leaf = self.left[nodes] < 0
            lq, ln = q[leaf], nodes[leaf]
            if len(lq):
                cnt = self.count[ln]
                rep_q = np.repeat(lq, cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tri = self.order[np.repeat(self.start[ln], cnt) + offs]
                cp, d2 = self._tri_query(rep_q, tri, points)
                # lexicographic (distance, triangle index) keeps ties deterministic
                srt = np.lexsort((tri, d2, rep_q))
                rep_q, tri, cp, d2 = rep_q[srt], tri[srt], cp[srt], d2[srt]
                first = np.r_[True, rep_q[1:] != rep_q[:-1]]
                uq, ut, ucp, ud = rep_q[first], tri[first], cp[first], d2[first]
                better = (ud < best[uq]) | ((ud == best[uq]) & (ut < best_tri[uq]))
                uq, ut, ucp, ud = uq[better], ut[better], ucp[better], ud[better]
                best[uq], best_tri[uq], best_pt[uq] = ud, ut, ucp
                bound[uq] = np.minimum(bound[uq], ud * (1 + 1e-12))
            iq, inode = q[~leaf], nodes[~leaf]
            q = np.concatenate([iq, iq])
            nodes = np.concatenate([self.left[inode], self.right[inode]])
        return np.sqrt(best), best_pt, best_tri

    def query_exhaustive(self, points: np.ndarray, chunk: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Brute-force scan over every triangle; reference for :meth:`query`."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = len(self.triangles)
        dist = np.empty(len(points))
        pts = np.empty((len(points), 3))
        tris = np.empty(len(points), dtype=np.int64)
        for s in range(0, len(points), chunk):
            qi = np.arange(s, min(s + chunk, len(points)))
            rep_q = np.repeat(qi, m)
            tri = np.tile(np.arange(m), len(qi))
            cp, d2 = self._tri_query(rep_q, tri, points)
            d2 = d2.reshape(len(qi), m)
            k = np.argmin(d2, axis=1)  # first index among ties
            dist[qi] = np.sqrt(d2[np.arange(len(qi)), k])
            pts[qi] = cp.reshape(len(qi), m, 3)[np.arange(len(qi)), k]
            tris[qi] = k
        return dist, pts, tris
