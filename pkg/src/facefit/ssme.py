"""Screen-space motion error: dense mesh-induced flow compared over frame windows."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import project
from .model import Region
from .raster import FlowField, ScreenMesh, flow_from_coverage, rasterize

DEFAULT_HORIZONS = 30
DEFAULT_RESOLUTION = 512

# evaluation regions as sets of vertex labels; "face" is the whole frontal face
REGION_SETS: dict[str, tuple[int, ...]] = {
    "face": (Region.FACE, Region.MOUTH, Region.NOSE, Region.EYES),
    "eyes": (Region.EYES,),
    "nose": (Region.NOSE,),
    "mouth": (Region.MOUTH,),
    "ears": (Region.EARS,),
}


def _region_codes(region) -> tuple[int, ...]:
    if isinstance(region, str):
        if region == "all":
            return tuple(int(r) for r in Region)
        if region not in REGION_SETS:
            raise ValueError(f"unknown region {region!r}; valid: {sorted(REGION_SETS) + ['all']}")
        return tuple(int(r) for r in REGION_SETS[region])
    if isinstance(region, (int, np.integer)):
        return (int(region),)
    return tuple(int(r) for r in region)


def epe(pred: FlowField, gt: FlowField, region="face") -> tuple[float, float]:
    """Mean per-pixel flow distance over pixels valid in both fields and inside the GT region.

    Returns (epe, coverage); epe is NaN when no pixel counts, coverage is NaN
    when the region has no ground-truth pixels.
    """
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError("flow fields have different dimensions")
    in_region = gt.valid & np.isin(gt.labels, _region_codes(region))
    counted = in_region & pred.valid
    n_region = int(in_region.sum())
    n = int(counted.sum())
    coverage = n / n_region if n_region else math.nan
    if n == 0:
        return math.nan, coverage
    d = np.linalg.norm(pred.flow[counted] - gt.flow[counted], axis=1)
    return float(d.mean()), coverage


def ssme_h(epes, n_frames: int, h: int) -> float:
    """Mean EPE over the frame pairs (t, t+h); undefined entries (NaN) are skipped."""
    if h < 1 or n_frames <= h:
        return math.nan
    vals = np.asarray(epes, dtype=np.float64)
    if len(vals) != n_frames - h:
        raise ValueError(f"expected {n_frames - h} EPE values for h={h}, got {len(vals)}")
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if len(vals) else math.nan


def ssme_aggregate(per_h) -> float:
    """Mean over horizons of the defined per-horizon errors."""
    vals = np.asarray(per_h, dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if len(vals) else math.nan


def temporal_gaussian_filter(tracks: np.ndarray, sigma_frames: float) -> np.ndarray:
    """Gaussian smoothing along axis 0, truncated at 3 sigma and renormalized at the ends."""
    if sigma_frames < 0:
        raise ValueError("sigma_frames must be >= 0")
    tracks = np.asarray(tracks, dtype=np.float64)
    if sigma_frames == 0 or len(tracks) < 2:
        return tracks.copy()
    radius = int(math.ceil(3 * sigma_frames))
    k = np.arange(-radius, radius + 1)
    kernel = np.exp(-(k**2) / (2 * sigma_frames**2))
    f = len(tracks)
    out = np.empty_like(tracks)
    for t in range(f):
        lo, hi = max(0, t - radius), min(f, t + radius + 1)
        w = kernel[lo - t + radius : hi - t + radius]
        out[t] = np.tensordot(w / w.sum(), tracks[lo:hi], axes=(0, 0))
    return out


@dataclass
class SsmeReport:
    horizons: int
    regions: tuple[str, ...]
    table: dict[str, np.ndarray]  # region -> (N_H,) SSME_h in pixels
    coverage: dict[str, np.ndarray]  # region -> (N_H,) mean coverage
    aggregate: dict[str, float]
    per_frame: dict[str, np.ndarray] = field(default_factory=dict)  # region -> (N_H, F) EPE, NaN where undefined
    pair_coverage: np.ndarray | None = None  # (N_H, F) fraction of GT-covered pixels also covered by pred

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "h", "ssme_px", "coverage"])
        for r in self.regions:
            for h in range(self.horizons):
                w.writerow([r, h + 1, _fmt(self.table[r][h]), _fmt(self.coverage[r][h])])
        for r in self.regions:
            w.writerow([r, "mean", _fmt(self.aggregate[r]), _fmt(_nanmean(self.coverage[r]))])
        return buf.getvalue()

    def per_frame_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "h", "t", "epe_px"])
        for r in self.regions:
            n_frames = self.per_frame[r].shape[1]
            for h in range(1, self.horizons + 1):
                for t in range(n_frames - h):
                    w.writerow([r, h, t, _fmt(self.per_frame[r][h - 1, t])])
        return buf.getvalue()


def _nanmean(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    return float(a.mean()) if len(a) else math.nan


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.9g}"


def evaluate_ssme(
    gt: list[ScreenMesh],
    pred: list[ScreenMesh],
    width: int = DEFAULT_RESOLUTION,
    height: int = DEFAULT_RESOLUTION,
    horizons: int = DEFAULT_HORIZONS,
    regions=tuple(REGION_SETS),
) -> SsmeReport:
    """SSME of a predicted screen-mesh sequence against ground truth.

    Each sequence is rasterized with its own topology; region labels come from
    the ground-truth meshes.
    """
    f = len(gt)
    if len(pred) != f:
        raise ValueError(f"frame count mismatch: {f} ground-truth vs {len(pred)} predicted")
    if horizons < 1:
        raise ValueError("horizons must be >= 1")
    regions = tuple(regions)
    epes = {r: np.full((horizons, f), np.nan) for r in regions}
    covs = {r: np.full((horizons, f), np.nan) for r in regions}
    pair_cov = np.full((horizons, f), np.nan)
    for t in range(f - 1):
        cov_gt = rasterize(gt[t], width, height)
        cov_pred = rasterize(pred[t], width, height)
        for h in range(1, min(horizons, f - 1 - t) + 1):
            fg = flow_from_coverage(cov_gt, gt[t], gt[t + h])
            fp = flow_from_coverage(cov_pred, pred[t], pred[t + h])
            n_gt = int(fg.valid.sum())
            pair_cov[h - 1, t] = (fg.valid & fp.valid).sum() / n_gt if n_gt else 0.0
            for r in regions:
                epes[r][h - 1, t], covs[r][h - 1, t] = epe(fp, fg, r)
    table, coverage, aggregate = {}, {}, {}
    for r in regions:
        table[r] = np.array([ssme_h(epes[r][h - 1, : f - h], f, h) for h in range(1, horizons + 1)])
        coverage[r] = np.array([_nanmean(covs[r][h - 1, : max(f - h, 0)]) for h in range(1, horizons + 1)])
        aggregate[r] = ssme_aggregate(table[r])
    return SsmeReport(horizons, regions, table, coverage, aggregate, epes, pair_cov)


def screen_meshes(world: np.ndarray, cam, triangles: np.ndarray, labels: np.ndarray | None) -> list[ScreenMesh]:
    """Project a (F, N, 3) world-space sequence into one camera."""
    out = []
    for verts in world:
        pix, depth, _ = project(cam, verts)
        out.append(ScreenMesh(pix, depth, np.asarray(triangles), labels))
    return out


def merge_reports(reports: list[SsmeReport]) -> SsmeReport:
    """Combine per-camera reports: each frame pair's EPE is averaged over the cameras that define it."""
    if not reports:
        raise ValueError("no reports to merge")
    if len(reports) == 1:
        return reports[0]
    horizons, regions = reports[0].horizons, reports[0].regions
    per_frame = {r: _nanmean_axis0(np.stack([rep.per_frame[r] for rep in reports])) for r in regions}
    n_frames = per_frame[regions[0]].shape[1] if regions else 0
    table, coverage, aggregate = {}, {}, {}
    for r in regions:
        table[r] = np.array([ssme_h(per_frame[r][h - 1, : n_frames - h], n_frames, h) for h in range(1, horizons + 1)])
        coverage[r] = _nanmean_axis0(np.stack([rep.coverage[r] for rep in reports]))
        aggregate[r] = ssme_aggregate(table[r])
    pair = _nanmean_axis0(np.stack([rep.pair_coverage for rep in reports]))
    return SsmeReport(horizons, regions, table, coverage, aggregate, per_frame, pair)


def _nanmean_axis0(a: np.ndarray) -> np.ndarray:
    ok = np.isfinite(a)
    n = ok.sum(axis=0)
    s = np.where(ok, a, 0.0).sum(axis=0)
    return np.divide(s, n, out=np.full(s.shape, np.nan), where=n > 0)
