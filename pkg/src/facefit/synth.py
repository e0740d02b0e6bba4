"""Synthetic tracking problems with fully known ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CAMERA_GROUPS, GROUPS, Observations, SequenceDataset, TrackingParams
from .fitting import world_vertices
from .geometry import Camera, RigidTransform, project
from .model import BlendshapeModel

MOTIONS = ("static", "sinusoidal", "orbit")
SIGMA_MODES = ("truthful", "constant", "miscalibrated")

# perturbation unit per group, in the group's physical units
PERTURB_SCALE = {
    "beta": 1.0,
    "phi": 1.0,
    "theta": 0.1,
    "delta_d": 1e-3,
    "head_rotation": 1.0,
    "head_translation": 0.1,
    "cam_rotation": 0.1,
    "cam_translation": 0.1,
    "cam_focal": None,  # image width
}
DEFAULT_PERTURB = ("beta", "phi", "head_rotation", "head_translation", "cam_rotation", "cam_translation", "cam_focal")


@dataclass(frozen=True)
class SynthSpec:
    frames: int = 20
    cameras: int = 2
    seed: int = 0
    beta_scale: float = 1.0
    phi_scale: float = 1.0
    motion: str = "sinusoidal"
    sigma_obs: float = 0.0
    # log-normal spread of per-observation noise levels; E[s^2] = 1 keeps sigma_obs the rms level
    sigma_spread: float = 0.5
    occlusion: float = 0.0
    sigma_mode: str = "truthful"
    sigma_factor: float = 1.0  # miscalibration factor, or the constant when sigma_mode="constant"
    pose_jitter: float = 0.0  # per-frame head translation noise (m)
    delta_d_scale: float = 0.0
    delta_d_regions: tuple[str, ...] = ("nose",)
    mica_noise: float | None = 0.0  # None: no template
    image_size: tuple[int, int] = (512, 512)
    focal: float = 1000.0
    distance: float = 1.0
    baseline_deg: float = 30.0
    calibrated: bool = True
    include_gt: bool = True

    def __post_init__(self):
        if self.frames < 1 or self.cameras < 1:
            raise ValueError("frames and cameras must be >= 1")
        if self.sigma_obs < 0 or not 0 <= self.occlusion < 1:
            raise ValueError("sigma_obs must be >= 0 and occlusion in [0, 1)")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")


def rig_cameras(spec: SynthSpec) -> list[Camera]:
    """Cameras on a horizontal arc around the origin, all looking at it."""
    if spec.cameras == 1:
        angles = [0.0]
    else:
        angles = np.radians(np.linspace(-spec.baseline_deg / 2, spec.baseline_deg / 2, spec.cameras))
    cams = []
    for a in angles:
        pos = spec.distance * np.array([np.sin(a), 0.0, np.cos(a)])
        z = -pos / np.linalg.norm(pos)
        y = np.array([0.0, -1.0, 0.0])
        x = np.cross(y, z)
        r = np.stack([x, y, z])
        cams.append(Camera.centered(RigidTransform.from_matrix(r, -r @ pos), spec.focal, spec.image_size, spec.calibrated))
    return cams


def _ground_truth(model: BlendshapeModel, spec: SynthSpec, cams: list[Camera]) -> TrackingParams:
    rng = np.random.default_rng([spec.seed, 0])
    f = spec.frames
    gt = TrackingParams.initial(model, f, cams)
    gt.beta[:] = rng.normal(0.0, spec.beta_scale, model.n_identity)
    t = np.arange(f)[:, None]
    base_phi = rng.normal(0.0, spec.phi_scale, model.n_expression)
    base_rot = rng.normal(0.0, 0.08, 3)
    base_trans = rng.normal(0.0, 0.01, 3)
    if spec.motion == "static":
        gt.phi[:] = base_phi
        rot = np.tile(base_rot, (f, 1))
    else:
        period = rng.uniform(12.0, 24.0, model.n_expression)
        phase = rng.uniform(0, 2 * np.pi, model.n_expression)
        gt.phi[:] = base_phi * np.sin(2 * np.pi * t / period + phase)
        rot = base_rot + 0.05 * np.sin(2 * np.pi * t / 30.0 + np.array([0.0, 1.0, 2.0]))
        if spec.motion == "orbit":
            rot = rot + np.outer(0.4 * np.sin(2 * np.pi * np.arange(f) / max(f, 2)), [0.0, 1.0, 0.0])
    gt.head_rotation[:] = rot
    gt.head_translation[:] = base_trans + 0.005 * np.sin(2 * np.pi * t / 25.0 + np.array([0.5, 1.5, 2.5]))
    if spec.pose_jitter > 0:
        gt.head_translation[:] += rng.normal(0.0, spec.pose_jitter, (f, 3))
    if spec.delta_d_scale > 0:
        mask = model.region_mask(spec.delta_d_regions)
        gt.delta_d[mask] = rng.normal(0.0, spec.delta_d_scale, (int(mask.sum()), 3))
    return gt


def generate_sequence(model: BlendshapeModel, spec: SynthSpec) -> tuple[SequenceDataset, TrackingParams]:
    """Draw ground truth from the seed and emit the observations it implies."""
    cams = rig_cameras(spec)
    gt = _ground_truth(model, spec, cams)
    world = world_vertices(gt, model)
    n = model.n_vertices
    cols = {k: [] for k in ("vertex", "camera", "frame", "mu", "sigma")}
    for t in range(spec.frames):
        rng = np.random.default_rng([spec.seed, 1, t])
        for j, cam in enumerate(cams):
            pix, _, valid = project(cam, world[t])
            scale = np.exp(spec.sigma_spread * rng.standard_normal(n) - spec.sigma_spread**2)
            true_sigma = spec.sigma_obs * scale
            noise = rng.standard_normal((n, 2)) * true_sigma[:, None]
            keep = valid & (rng.random(n) >= spec.occlusion)
            if spec.sigma_mode == "constant":
                reported = np.full(n, spec.sigma_factor)
            elif spec.sigma_obs == 0:
                reported = np.full(n, 1.0)
            elif spec.sigma_mode == "miscalibrated":
                reported = spec.sigma_factor * true_sigma
            else:
                reported = true_sigma
            idx = np.flatnonzero(keep)
            cols["vertex"].append(idx)
            cols["camera"].append(np.full(len(idx), j))
            cols["frame"].append(np.full(len(idx), t))
            cols["mu"].append(pix[idx] + noise[idx] if spec.sigma_obs > 0 else pix[idx])
            cols["sigma"].append(reported[idx])
    obs = Observations(*(np.concatenate(cols[k]) for k in ("vertex", "camera", "frame", "mu", "sigma")))
    mica = None
    if spec.mica_noise is not None:
        neutral = model.template + model.identity_basis @ gt.beta + gt.delta_d
        noise = np.random.default_rng([spec.seed, 2]).normal(0.0, spec.mica_noise, neutral.shape) if spec.mica_noise > 0 else 0.0
        mica = neutral + noise
    dataset = SequenceDataset(
        cameras=cams,
        n_frames=spec.frames,
        n_vertices=n,
        observations=obs,
        mica_template=mica,
        gt_vertices=world if spec.include_gt else None,
    )
    return dataset, gt


def perturb_params(params: TrackingParams, magnitude: float, seed: int, groups=DEFAULT_PERTURB) -> TrackingParams:
    """Add seeded Gaussian noise of the given magnitude to each listed group.

    Camera groups are only perturbed for uncalibrated cameras.
    """
    out = params.copy()
    rng = np.random.default_rng([seed, 3])
    free_cam = ~params.cam_calibrated
    for g in GROUPS:
        arr = getattr(out, g)
        noise = rng.standard_normal(arr.shape)  # drawn for every group so streams stay aligned
        if g not in groups or magnitude == 0:
            continue
        scale = PERTURB_SCALE[g]
        if g == "cam_focal":
            scale = params.cam_image_size[:, 0].astype(np.float64)
        delta = magnitude * scale * noise
        if g in CAMERA_GROUPS:
            delta = delta * (free_cam if g == "cam_focal" else free_cam[:, None])
        setattr(out, g, arr + delta)
    if "cam_focal" in groups and np.any(out.cam_focal <= 0):
        raise ValueError("perturbation produced a non-positive focal length")
    return out

