"""Energy weights, optimizer settings and their JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import GROUPS
from .model import BlendshapeModel, Region


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyConfig:
    """All fitting knobs.

    The lambda defaults are tuned for the synthetic head. The optimizer is
    AdamW at lr 1e-2, halved after 30 iterations without improvement.
    """

    lambda_flame: float = 1e-4
    lambda_temp: float = 10.0
    lambda_mica: float = 100.0
    lambda_deform: float = 1e3
    vertex_weight_high: float = 1.0
    vertex_weight_low: float = 0.005
    learning_rate_init: float = 1e-2
    lr_decay: float = 0.5
    lr_patience: int = 30
    lr_floor: float = 1e-5
    max_iters: int = 10_000
    grad_tol: float = 1e-9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # δ_d is free only on these regions; empty disables it
    deformable_regions: tuple[str, ...] = ()
    freeze: tuple[str, ...] = ("theta",)
    # replaces every observation's sigma when set
    constant_sigma: float | None = None
    mica_template: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("lambda_flame", "lambda_temp", "lambda_mica", "lambda_deform"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (self.vertex_weight_high > 0 and self.vertex_weight_low > 0):
            raise ConfigError("vertex weights must be positive")
        if not 0 < self.lr_decay < 1:
            raise ConfigError(f"lr_decay must be in (0, 1), got {self.lr_decay}")
        if not self.learning_rate_init > 0 or not self.lr_floor >= 0:
            raise ConfigError("learning_rate_init must be > 0 and lr_floor >= 0")
        if self.lr_patience < 1 or self.max_iters < 0:
            raise ConfigError("lr_patience must be >= 1 and max_iters >= 0")
        if self.constant_sigma is not None and not self.constant_sigma > 0:
            raise ConfigError("constant_sigma must be > 0")
        bad = set(self.freeze) - set(GROUPS)
        if bad:
            raise ConfigError(f"unknown parameter groups in freeze: {sorted(bad)}; valid: {list(GROUPS)}")
        valid_regions = {r.name.lower() for r in Region}
        bad = set(self.deformable_regions) - valid_regions
        if bad:
            raise ConfigError(f"unknown deformable regions {sorted(bad)}; valid: {sorted(valid_regions)}")
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "deformable_regions", tuple(self.deformable_regions))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def vertex_weights(self, model: BlendshapeModel) -> np.ndarray:
        """Per-vertex alignment weight: high on face and ears, low elsewhere."""
        return np.where(model.region_labels == Region.OTHER, self.vertex_weight_low, self.vertex_weight_high)

    def deformable_mask(self, model: BlendshapeModel) -> np.ndarray:
        return model.region_mask(self.deformable_regions)

    def is_free(self, group: str) -> bool:
        if group == "delta_d" and not self.deformable_regions:
            return False
        return group not in self.freeze

    def replace(self, **changes) -> "EnergyConfig":
        return replace(self, **changes)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "mica_template"}
        d["adam_betas"] = list(d["adam_betas"])
        d["freeze"] = list(d["freeze"])
        d["deformable_regions"] = list(d["deformable_regions"])
        return json.dumps(d, indent=2, sort_keys=True)


CONFIG_KEYS = tuple(f.name for f in fields(EnergyConfig) if f.name != "mica_template")


def load_config(text: str) -> EnergyConfig:
    """Parse a JSON config; missing keys take defaults, unknown keys are rejected."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {list(CONFIG_KEYS)}")
    for key in ("freeze", "deformable_regions", "adam_betas"):
        if key in raw and not isinstance(raw[key], list):
            raise ConfigError(f"{key} must be a list")
    try:
        return EnergyConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
