"""Run configuration: hyperparameters, ablation switches, flat key=value files."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .losses import LossWeights

__all__ = ["RunConfig", "load_config_file", "parse_config_text", "config_to_text"]

_PROFILES = {
    "object": {"points": 1024, "gaussians": 8},
    "lidar": {"points": 8192, "gaussians": 16},
}

FUSION_MODES = ("attention", "cat", "off")


@dataclass
class RunConfig:
    """Everything a fit run needs; defaults follow the reference setup."""

    profile: str = "object"
    points_per_frame: int = 0        # 0 = profile default
    gaussians: int = 0               # 0 = profile default
    kappa: int = 200
    iterations: int = 5000
    patience: int = 1000
    lr: float = 0.001
    weight_decay: float = 0.0
    lambda_cd: float = 1.0
    lambda_smooth: float = 1.0
    lambda_emd: float = 50.0
    smoothness: bool = True
    smooth_k: int = 9
    seed: int = 0
    outlier_removal: bool = False
    outlier_k: int = 16
    outlier_std: float = 2.0
    poly_power: float = 0.9
    # ablation switches
    neural_field: bool = True
    gauss_pc: bool = True
    t_rbf_gr: bool = True
    deformation: bool = True
    fusion: str = "attention"
    # architecture sizes (reduced in small-scene tests)
    field_input_width: int = 1280
    field_hidden_width: int = 32
    field_hidden_depth: int = 5
    edgeconv_k: int = 16
    dropout: float = 0.0

    @property
    def points(self) -> int:
        return self.points_per_frame or _PROFILES[self.profile]["points"]

    @property
    def n_gaussians(self) -> int:
        return self.gaussians or _PROFILES[self.profile]["gaussians"]

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cd, self.lambda_smooth, self.lambda_emd)

    def validate(self) -> "RunConfig":
        if self.profile not in _PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        for name in ("kappa", "iterations", "patience", "smooth_k", "edgeconv_k",
                     "field_input_width", "field_hidden_width", "field_hidden_depth"):
            if getattr(self, name) < 0 or (name not in ("iterations",) and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.points < 1 or self.n_gaussians < 1:
            raise ValueError("points_per_frame and gaussians must be positive")
        if not self.neural_field and not self.gauss_pc:
            raise ValueError("at least one feature path must stay enabled")
        if (self.t_rbf_gr or self.deformation) and not self.gauss_pc:
            raise ValueError("temporal residuals and the deformation field require gauss_pc")
        if self.fusion != "off" and not (self.neural_field and self.gauss_pc):
            # fusion needs two feature streams; silently degrade to passthrough
            pass
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.loss_weights  # raises on negative weights
        return self

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs).validate()


def _parse_value(ftype, raw: str):
    raw = raw.strip()
    if ftype is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {raw!r}")
    return ftype(raw)


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat key=value lines; '#' starts a comment."""
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{origin}, line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{origin}, line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(types[key], raw)
    return out


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), origin=str(path))


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
