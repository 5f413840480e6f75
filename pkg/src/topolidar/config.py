"""Flat key=value run configuration with typed parsing.

One file drives every stage; unknown keys are rejected so a typo cannot
silently fall back to a default.  Values are parsed by the declared field
type (int, float, bool, str, or comma-separated int tuple).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .rangeimage import ProjectionConfig
from .synth import SceneSpec


@dataclass(frozen=True)
class RunConfig:
    # range-image geometry
    height: int = 64
    width: int = 1024
    fov_up: float = 3.0
    fov_down: float = -25.0
    r_min: float = 1.0
    r_max: float = 80.0
    log_scale: bool = True
    # encoder / decoder
    f_v: int = 4  # vertical patch size and decoder upsampling factor
    f_h: int = 8  # horizontal counterpart
    latent_dim: int = 16
    k: int = 20
    n_layers: int = 4
    enc_channels: tuple[int, ...] = (8, 16)
    dec_channels: tuple[int, ...] = (16, 8, 8)
    sum_branch: bool = True
    slope: float = 0.2
    # stage-1 training
    lambda_topo: float = 0.01
    lambda_kl: float = 1e-6
    sample_cap: int = 512
    lr_vae: float = 4.5e-6
    epochs_vae: int = 100
    period: int = 100
    stochastic: bool = True
    # stage-2 diffusion
    schedule: str = "linear"
    t_steps: int = 1000
    widths: tuple[int, ...] = (32, 64)
    temb_dim: int = 32
    cond_dim: int = 16
    lr_ldm: float = 1e-4
    epochs_ldm: int = 100
    sample_steps: int = 50
    eta: float = 0.0
    # synthetic scenes
    ground_z: float = -2.0
    n_boxes: int = 5
    n_cylinders: int = 4
    # reproducibility
    seed: int = 0

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(
            fov_down_deg=self.fov_down,
            fov_up_deg=self.fov_up,
            r_min=self.r_min,
            r_max=self.r_max,
            log_scale=self.log_scale,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(ground_z=self.ground_z, n_boxes=self.n_boxes, n_cylinders=self.n_cylinders)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = get_type_hints(RunConfig)


def _parse_value(key: str, raw: str):
    hint = _HINTS[key]
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        # remaining fields are comma-separated int tuples
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' comments and blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RunConfig) -> str:
    """Render a config in the same format parse_config reads."""
    lines = []
    for field in dataclasses.fields(RunConfig):
        value = getattr(cfg, field.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{field.name} = {value}")
    return "\n".join(lines) + "\n"
