"""Fitting energy: 2D alignment, shape/expression prior, temporal smoothness,
neutral-shape prior and deformation penalty, with exact gradients.

Everything is evaluated in float64 torch so that the gradient comes from the
same graph that produced the value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ._kernels import Observed, WorldTerms
from .config import EnergyConfig
from .data import CAMERA_GROUPS, GROUPS, Observations, TrackingParams
from .model import BlendshapeModel, ModelError, rodrigues_t, torch_model

log = logging.getLogger(__name__)

TERMS = ("alignment", "flame", "temporal", "mica", "deform")


class EnergyError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergyTerms:
    alignment: float
    flame: float
    temporal: float
    mica: float
    deform: float
    n_invalid: int = 0
    mica_active: bool = True

    @property
    def total(self) -> float:
        return self.alignment + self.flame + self.temporal + self.mica + self.deform

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERMS}


def _t(a) -> torch.Tensor:
    return torch.from_numpy(np.array(a, dtype=np.float64))


class EnergyProblem:
    """Precomputed observation tensors for repeated energy evaluation."""

    def __init__(self, model: BlendshapeModel, observations: Observations | None, config: EnergyConfig):
        self.model = model
        self.config = config
        self.tm = torch_model(model)
        self.deform_mask = _t(config.deformable_mask(model)[:, None].astype(np.float64))
        self.mica = None
        if config.mica_template is not None:
            tpl = np.asarray(config.mica_template, dtype=np.float64)
            if tpl.shape != (model.n_vertices, 3):
                raise ModelError(f"MICA template has shape {tpl.shape}, model has ({model.n_vertices}, 3)")
            self.mica = _t(tpl)
        self.obs = None
        if observations is not None and len(observations):
            weights = config.vertex_weights(model)
            sigma = observations.sigma if config.constant_sigma is None else np.full(len(observations), config.constant_sigma)
            w = weights[observations.vertex] / (2.0 * sigma**2)
            self.obs = Observed(observations.camera, observations.frame, observations.vertex, observations.mu, w)
        n, _, k = model.expression_basis.shape
        self.expression_rows = self.tm.expression_basis.reshape(n * 3, k).T.contiguous()  # (B_ex, 3N)

    # ------------------------------------------------------------ geometry

    def pose_active(self, tp: dict[str, torch.Tensor]) -> bool:
        theta = tp["theta"]
        return theta.requires_grad or bool(torch.any(theta != 0))

    def local_vertices(self, tp) -> torch.Tensor:
        rest = self.tm.rest(tp["beta"], tp["phi"])
        if self.pose_active(tp):
            rest = self.tm.pose(rest, tp["theta"])
        return rest + tp["delta_d"]

    def world_vertices(self, tp) -> torch.Tensor:
        local = self.local_vertices(tp)
        rot = rodrigues_t(tp["head_rotation"])  # (F, 3, 3)
        return local @ rot.transpose(-1, -2) + tp["head_translation"].unsqueeze(-2)

    def neutral(self, tp) -> torch.Tensor:
        return self.tm.template + self.tm.identity_basis @ tp["beta"] + tp["delta_d"]

    def split_local(self, tp) -> tuple[torch.Tensor, torch.Tensor]:
        """Local vertices as base (N, 3) plus per-frame offsets (F, N, 3)."""
        if self.pose_active(tp):
            local = self.local_vertices(tp)
            return torch.zeros(local.shape[1:], dtype=torch.float64), local
        n = self.model.n_vertices
        offsets = (tp["phi"] @ self.expression_rows).reshape(-1, n, 3)
        return self.neutral(tp), offsets

    # ------------------------------------------------------------ terms

    def world_terms(self, tp, align: bool = True, temporal: bool = True):
        """(E_A, E_temp, number of behind-camera observations)."""
        align = align and self.obs is not None
        temporal = temporal and tp["phi"].shape[0] >= 3
        zero = torch.zeros((), dtype=torch.float64)
        if not (align or temporal):
            return zero, zero, 0
        base, offsets = self.split_local(tp)
        # behind-camera points drop out instead of aborting the fit
        e_a, e_t, bad = WorldTerms.apply(
            base,
            offsets,
            rodrigues_t(tp["head_rotation"]),
            tp["head_translation"],
            rodrigues_t(tp["cam_rotation"]),
            tp["cam_translation"],
            tp["cam_focal"],
            tp["cam_principal"],
            self.obs,
            self.config.lambda_temp,
            align,
            temporal,
        )
        return e_a, e_t, int(bad)

    def flame(self, tp):
        return _flame_t(tp, self.config)

    def mica_term(self, tp):
        if self.mica is None:
            return torch.zeros((), dtype=torch.float64)
        return self.config.lambda_mica * ((self.neutral(tp) - self.mica) ** 2).sum()

    def deform(self, tp):
        return _deform_t(tp, self.config)

    def terms(self, tp, which=TERMS) -> tuple[dict[str, torch.Tensor], int]:
        e_a, e_t, n_invalid = self.world_terms(tp, "alignment" in which, "temporal" in which)
        zero = torch.zeros((), dtype=torch.float64)
        out = {
            "alignment": e_a,
            "flame": self.flame(tp) if "flame" in which else zero,
            "temporal": e_t,
            "mica": self.mica_term(tp) if "mica" in which else zero,
            "deform": self.deform(tp) if "deform" in which else zero,
        }
        return out, n_invalid

    # ------------------------------------------------------------ masks

    def grad_masks(self, params: TrackingParams) -> dict[str, np.ndarray | None]:
        """Multiplicative gradient masks; None marks a frozen group."""
        masks: dict[str, np.ndarray | None] = {}
        cam_free = ~params.cam_calibrated
        for g in GROUPS:
            if not self.config.is_free(g):
                masks[g] = None
            elif g in CAMERA_GROUPS:
                if not cam_free.any():
                    masks[g] = None
                else:
                    shape = (-1, 1) if g != "cam_focal" else (-1,)
                    masks[g] = cam_free.astype(np.float64).reshape(shape)
            elif g == "delta_d":
                masks[g] = self.deform_mask.numpy()
            else:
                masks[g] = np.ones(1)
        return masks


def _flame_t(tp, config):
    return config.lambda_flame * ((tp["beta"] ** 2).sum() + (tp["phi"] ** 2).sum())


def _deform_t(tp, config):
    return config.lambda_deform * (tp["delta_d"] ** 2).sum()


def tensors(params: TrackingParams, requires_grad=()) -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in params.arrays().items():
        if name in ("cam_image_size", "cam_calibrated"):
            continue
        t = _t(arr)
        if name in requires_grad:
            t.requires_grad_(True)
        out[name] = t
    return out


def _evaluate(params, observations, config, model, which=TERMS) -> EnergyTerms:
    problem = EnergyProblem(model, observations, config)
    with torch.no_grad():
        vals, n_invalid = problem.terms(tensors(params), which)
    if "mica" in which and problem.mica is None:
        log.debug("no MICA template configured; neutral-shape prior disabled")
    return EnergyTerms(
        **{k: float(v) for k, v in vals.items()},
        n_invalid=n_invalid,
        mica_active=problem.mica is not None,
    )


def energy_alignment(params: TrackingParams, observations: Observations, model: BlendshapeModel, config: EnergyConfig | None = None) -> float:
    return _evaluate(params, observations, config or EnergyConfig(), model, ("alignment",)).alignment


def energy_flame_reg(params: TrackingParams, config: EnergyConfig) -> float:
    return float(_flame_t(tensors(params), config))


def energy_temporal(params: TrackingParams, model: BlendshapeModel, config: EnergyConfig | None = None) -> float:
    return _evaluate(params, None, config or EnergyConfig(), model, ("temporal",)).temporal


def energy_mica(params: TrackingParams, config: EnergyConfig, model: BlendshapeModel) -> float:
    return _evaluate(params, None, config, model, ("mica",)).mica


def energy_deform(params: TrackingParams, config: EnergyConfig) -> float:
    return float(_deform_t(tensors(params), config))


def total_energy(params: TrackingParams, observations: Observations, config: EnergyConfig, model: BlendshapeModel) -> tuple[float, EnergyTerms]:
    terms = _evaluate(params, observations, config, model)
    return terms.total, terms


def gradient(
    params: TrackingParams,
    observations: Observations,
    config: EnergyConfig,
    model: BlendshapeModel,
    terms=TERMS,
) -> dict[str, np.ndarray]:
    """Exact gradient of the selected terms w.r.t. every parameter group.

    Frozen groups, calibrated cameras and δ_d outside the deformable region
    get exact zeros.
    """
    problem = EnergyProblem(model, observations, config)
    masks = problem.grad_masks(params)
    free = [g for g, m in masks.items() if m is not None]
    tp = tensors(params, requires_grad=free)
    vals, _ = problem.terms(tp, terms)
    total = sum(vals[name] for name in TERMS)
    grads = torch.autograd.grad(total, [tp[g] for g in free], allow_unused=True) if free and total.requires_grad else []
    out = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}
    for g, gr in zip(free, grads):
        if gr is not None:
            out[g] = gr.numpy() * masks[g]
    return out



@dataclass
class GradCheck:
    """Analytic vs central-difference gradient on sampled coordinates."""

    coords: list[tuple[str, tuple[int, ...]]]
    analytic: np.ndarray
    numeric: np.ndarray
    floor: float

    @property
    def rel_errors(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.floor)
        return np.abs(self.analytic - self.numeric) / denom

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if len(self.coords) else 0.0


def sample_coordinates(params: TrackingParams, masks: dict[str, np.ndarray | None], n: int, seed: int) -> list[tuple[str, tuple[int, ...]]]:
    """``n`` distinct free coordinates, drawn round-robin over the free groups."""
    rng = np.random.default_rng(seed)
    pools = {}
    for g, m in masks.items():
        if m is None:
            continue
        free = np.broadcast_to(m, getattr(params, g).shape) != 0
        idx = np.argwhere(free)
        if len(idx):
            pools[g] = [tuple(int(k) for k in i) for i in idx[rng.permutation(len(idx))]]
    out: list[tuple[str, tuple[int, ...]]] = []
    while len(out) < n and any(pools.values()):
        for g in list(pools):
            if pools[g] and len(out) < n:
                out.append((g, pools[g].pop()))
    return out


def check_gradient(
    params: TrackingParams,
    observations: Observations,
    config: EnergyConfig,
    model: BlendshapeModel,
    terms=TERMS,
    n_coords: int = 50,
    seed: int = 0,
    grad_fn=None,
) -> GradCheck:
    """Compare ``gradient`` (or ``grad_fn``) with central differences of the energy.

    Step is 1e-6 * max(1, |x|). Relative error uses max(|a|, |fd|, floor) as
    denominator with floor = 1e-5 * max(1, E): components far below the energy's
    own rounding scale are judged absolutely.
    """
    problem = EnergyProblem(model, observations, config)
    coords = sample_coordinates(params, problem.grad_masks(params), n_coords, seed)
    grads = (grad_fn or gradient)(params, observations, config, model, terms)

    def energy(p: TrackingParams) -> float:
        with torch.no_grad():
            vals, _ = problem.terms(tensors(p), terms)
        return float(sum(vals[name] for name in TERMS))

    e0 = energy(params)
    analytic, numeric = [], []
    for g, idx in coords:
        x = float(getattr(params, g)[idx])
        h = 1e-6 * max(1.0, abs(x))
        vals = []
        for s in (1.0, -1.0):
            p = params.copy()
            arr = getattr(p, g).copy()
            arr[idx] = x + s * h
            setattr(p, g, arr)
            vals.append(energy(p))
        numeric.append((vals[0] - vals[1]) / (2 * h))
        analytic.append(float(grads[g][idx]))
    return GradCheck(coords, np.array(analytic), np.array(numeric), 1e-5 * max(1.0, abs(e0)))
