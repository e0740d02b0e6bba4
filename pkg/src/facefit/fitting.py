"""Joint optimization of shape, expression, head poses and cameras."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import EnergyConfig
from .data import CAMERA_GROUPS, SequenceDataset, TrackingParams
from .energy import TERMS, EnergyError, EnergyProblem, EnergyTerms, tensors
from .geometry import log_rotation, project, rodrigues
from .model import BlendshapeModel, ModelParams, evaluate_model

log = logging.getLogger(__name__)

# optimizer variable = physical value / scale, so one lr suits every group
_GROUP_SCALE = {"delta_d": 1e-3}


@dataclass
class FitReport:
    params: TrackingParams
    trace: np.ndarray  # (iterations, 5) per-term energies before each step
    iterations: int
    final_lr: float
    reason: str
    initial_energy: float
    final_terms: EnergyTerms
    flags: list[str] = field(default_factory=list)

    @property
    def final_energy(self) -> float:
        return self.final_terms.total

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "total", *TERMS])
        for k, row in enumerate(self.trace):
            w.writerow([k, repr(float(sum(row))), *(repr(float(v)) for v in row)])
        return buf.getvalue()


def _scales(params: TrackingParams) -> dict[str, torch.Tensor | float]:
    scales: dict[str, torch.Tensor | float] = dict(_GROUP_SCALE)
    scales["cam_focal"] = torch.from_numpy(params.cam_image_size[:, 0].astype(np.float64))
    return scales


def config_for(dataset: SequenceDataset, config: EnergyConfig) -> EnergyConfig:
    """Fill in the dataset's neutral-shape template when the config has none."""
    if config.mica_template is None and dataset.mica_template is not None:
        return config.replace(mica_template=dataset.mica_template)
    return config


def fit(dataset: SequenceDataset, config: EnergyConfig, init: TrackingParams, model: BlendshapeModel) -> FitReport:
    """Minimize the total energy from ``init``; returns the best iterate found."""
    if init.n_frames != dataset.n_frames or init.n_cameras != dataset.n_cameras:
        raise ValueError("init does not match the dataset's frame/camera counts")
    config = config_for(dataset, config)
    problem = EnergyProblem(model, dataset.observations, config)
    masks = problem.grad_masks(init)
    free = [g for g, m in masks.items() if m is not None]
    flags = [] if problem.mica is not None else ["mica_disabled"]

    base = tensors(init)
    if "delta_d" in free:
        base["delta_d"] = base["delta_d"] * problem.deform_mask
    scales = _scales(init)
    row_masks = {g: torch.from_numpy(masks[g].astype(bool)).expand_as(base[g]) for g in free if g in CAMERA_GROUPS}
    variables = {g: (base[g] / scales.get(g, 1.0)).clone().requires_grad_(True) for g in free}

    def assemble():
        tp = dict(base)
        for g in free:
            phys = variables[g] * scales.get(g, 1.0)
            if g == "delta_d":
                phys = phys * problem.deform_mask
            elif g in row_masks:
                phys = torch.where(row_masks[g], phys, base[g])
            tp[g] = phys
        return tp

    lr = config.learning_rate_init
    opt = torch.optim.AdamW(
        [variables[g] for g in free] or [torch.zeros(1, requires_grad=True)],
        lr=lr,
        betas=config.adam_betas,
        eps=config.adam_eps,
        weight_decay=0.0,
    )
    trace: list[list[float]] = []
    best, best_state, wait = math.inf, {g: v.detach().clone() for g, v in variables.items()}, 0
    reason = "max_iters"
    initial = None
    for it in range(config.max_iters):
        opt.zero_grad()
        vals, _ = problem.terms(assemble())
        row = [float(vals[name].detach()) for name in TERMS]
        for name, v in zip(TERMS, row):
            if not math.isfinite(v):
                raise EnergyError(f"non-finite energy in term '{name}' at iteration {it}")
        trace.append(row)
        energy = sum(row)
        if initial is None:
            initial = energy
        if energy < best:
            best, wait = energy, 0
            best_state = {g: v.detach().clone() for g, v in variables.items()}
        else:
            wait += 1
        if not free:
            reason = "nothing_free"
            break
        sum(vals[name] for name in TERMS).backward()
        gmax = max(float(variables[g].grad.abs().max()) for g in free)
        if gmax < config.grad_tol:
            reason = "gradient"
            break
        if wait >= config.lr_patience:
            lr *= config.lr_decay
            wait = 0
            for group in opt.param_groups:
                group["lr"] = lr
            if lr < config.lr_floor:
                reason = "lr_floor"
                break
        opt.step()

    with torch.no_grad():
        for g in free:
            variables[g].copy_(best_state[g])
        tp = assemble()
        vals, n_invalid = problem.terms(tp)
    final = init.copy()
    for g in free:
        setattr(final, g, tp[g].detach().numpy().copy())
    terms = EnergyTerms(**{k: float(v) for k, v in vals.items()}, n_invalid=n_invalid, mica_active=problem.mica is not None)
    if n_invalid:
        flags.append(f"invalid_projections={n_invalid}")
    log.info("fit finished after %d iterations (%s), energy %.6g", len(trace), reason, terms.total)
    return FitReport(
        params=final,
        trace=np.array(trace, dtype=np.float64).reshape(-1, len(TERMS)),
        iterations=len(trace),
        final_lr=lr,
        reason=reason,
        initial_energy=terms.total if initial is None else initial,
        final_terms=terms,
        flags=flags,
    )


def _similarity_pose(model_pts: np.ndarray, pix: np.ndarray, focal: float, pp: np.ndarray):
    """Weak-perspective fit of 3D model points to 2D pixels; returns camera-space (R, t) or None."""
    if len(model_pts) < 4:
        return None
    xm = model_pts.mean(axis=0)
    um = pix.mean(axis=0)
    a, *_ = np.linalg.lstsq(model_pts - xm, pix - um, rcond=None)  # (3, 2)
    u, s, vt = np.linalg.svd(a.T, full_matrices=False)
    if s.min() <= 1e-12:
        return None
    r12 = u @ vt  # rows: first two rows of the rotation
    r = np.vstack([r12, np.cross(r12[0], r12[1])])
    depth = focal / s.mean()
    centre = np.array([(um[0] - pp[0]) * depth / focal, (um[1] - pp[1]) * depth / focal, depth])
    return r, centre - r @ xm


def initialize_params(dataset: SequenceDataset, model: BlendshapeModel) -> TrackingParams:
    """Zero shape and expression; head poses from a per-frame weak-perspective fit in camera 0."""
    cameras = []
    for cam in dataset.cameras:
        if not cam.calibrated:
            cam = type(cam)(cam.extrinsics, float(cam.image_size[0]), cam.principal_point, cam.image_size, False)
        cameras.append(cam)
    params = TrackingParams.initial(model, dataset.n_frames, cameras)
    cam0 = cameras[0]
    rc, tc = cam0.extrinsics.matrix, np.asarray(cam0.extrinsics.translation)
    obs = dataset.observations
    for t in range(dataset.n_frames):
        sel = (obs.frame == t) & (obs.camera == 0)
        fitted = _similarity_pose(model.template[obs.vertex[sel]], obs.mu[sel], cam0.focal, np.asarray(cam0.principal_point))
        if fitted is None:
            r_cam, t_cam = np.eye(3), np.array([0.0, 0.0, 1.0])
            r_world = np.eye(3)
        else:
            r_cam, t_cam = fitted
            r_world = rc.T @ r_cam
        params.head_rotation[t] = log_rotation(r_world)
        params.head_translation[t] = rc.T @ (t_cam - tc)
    return params


def world_vertices(params: TrackingParams, model: BlendshapeModel) -> np.ndarray:
    """World-space vertices for every frame, (F, N, 3)."""
    out = np.empty((params.n_frames, model.n_vertices, 3))
    for t in range(params.n_frames):
        local = evaluate_model(model, ModelParams(params.beta, params.phi[t], params.theta[t], params.delta_d))
        out[t] = local @ rodrigues(params.head_rotation[t]).T + params.head_translation[t]
    return out



def reprojection_errors(params: TrackingParams, observations, model: BlendshapeModel) -> np.ndarray:
    """Pixel distance between each observation's μ and its projected vertex (NaN if behind the camera)."""
    world = world_vertices(params, model)
    out = np.full(len(observations), np.nan)
    for j, cam in enumerate(params.cameras):
        sel = np.flatnonzero(observations.camera == j)
        if not len(sel):
            continue
        pix, _, _ = project(cam, world[observations.frame[sel], observations.vertex[sel]])
        out[sel] = np.linalg.norm(pix - observations.mu[sel], axis=1)
    return out
