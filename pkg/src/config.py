"""Pipeline configuration loaded from TOML."""

from __future__ import annotations

import logging
import math
import os
import tomllib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError
from .models import CameraIntrinsics, ProviderConfig

logger = logging.getLogger(__name__)

ENDPOINT_ENV = {
    "mask": "UG_MASK_ENDPOINT",
    "embed": "UG_EMBED_ENDPOINT",
    "vlm": "UG_VLM_ENDPOINT",
}


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SuperpointConfig(Section):
    voxel_size: float = Field(default=0.02, gt=0)
    seed_spacing: float = Field(default=0.5, gt=0)
    weights: tuple[float, float, float] = (0.2, 0.4, 1.0)  # color, spatial, normal
    max_distance: float = Field(default=0.6, gt=0)
    angle_thresh_deg: float = Field(default=15.0, gt=0, lt=90)
    color_thresh: float = Field(default=30.0, ge=0)
    k_neighbors: int = Field(default=16, ge=3)

    @model_validator(mode="after")
    def _check_spacing(self) -> SuperpointConfig:
        if self.seed_spacing < self.voxel_size:
            raise ValueError("seed_spacing must be at least voxel_size")
        return self

    @property
    def angle_thresh(self) -> float:
        return math.radians(self.angle_thresh_deg)


class MergeConfig(Section):
    start: float = 0.9
    end: float = 0.5
    stages: int = Field(default=5, ge=2)
    order: Literal["affinity", "size"] = "affinity"
    denominator: Literal["projected", "points"] = "projected"
    reproject: bool = False
    occlusion_tol: float = Field(default=0.05, gt=0)
    splat_radius: int = Field(default=1, ge=0)


class SemanticsConfig(Section):
    u: int = Field(default=5, ge=1)
    max_views: int = Field(default=10, ge=1)
    scales: tuple[float, ...] = (1.0, 1.5, 2.25)
    include_full_image: bool = True
    min_prompts: int = Field(default=10, ge=1)
    max_prompts: int = Field(default=50, ge=1)
    min_instance_points: int = Field(default=30, ge=1)
    max_in_flight: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _check_scales(self) -> SemanticsConfig:
        if not self.scales or self.scales[0] != 1.0:
            raise ValueError("scales must start at 1.0")
        if any(a >= b for a, b in zip(self.scales, self.scales[1:], strict=False)):
            raise ValueError("scales must be ascending")
        if self.min_prompts > self.max_prompts:
            raise ValueError("min_prompts exceeds max_prompts")
        return self


class ViewsConfig(Section):
    azimuths_deg: tuple[float, ...] = (90.0, 210.0, 330.0)
    l: int = Field(default=3, ge=1)  # noqa: E741
    h_min: float = Field(default=1.5, gt=0)
    r_scale: float = Field(default=0.75, gt=0)
    height_margin: float = Field(default=1.0, ge=0)
    base_radius: float = Field(default=0.015, gt=0)
    width: int = Field(default=640, gt=0)
    height: int = Field(default=480, gt=0)
    fov_deg: float = Field(default=60.0, gt=0, lt=180)
    axes_length: float = Field(default=0.5, gt=0)
    label_tol: float = Field(default=0.2, ge=0)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_deg)


class PromptToggles(Section):
    spatial: bool = True
    semantic: bool = True
    visual_cot: bool = True

    @property
    def label(self) -> str:
        off = [name for name in ("spatial", "semantic", "visual_cot") if not getattr(self, name)]
        return "all" if not off else "no_" + "_".join(off)


class ReasonerConfig(Section):
    max_retries: int = Field(default=1, ge=0)
    naming_retries: int = Field(default=1, ge=0)
    match_threshold: float = Field(default=0.6, ge=-1, le=1)
    naming_workers: int = Field(default=4, ge=1)
    toggles: PromptToggles = Field(default_factory=PromptToggles)


class ProvidersConfig(Section):
    kind: Literal["mock", "http"] = "mock"
    mask: ProviderConfig = Field(default_factory=ProviderConfig)
    embed: ProviderConfig = Field(default_factory=ProviderConfig)
    vlm: ProviderConfig = Field(default_factory=ProviderConfig)
    seed: int = 0


class PipelineConfig(Section):
    superpoints: SuperpointConfig = Field(default_factory=SuperpointConfig)
    merge: MergeConfig = Field(default_factory=MergeConfig)
    semantics: SemanticsConfig = Field(default_factory=SemanticsConfig)
    views: ViewsConfig = Field(default_factory=ViewsConfig)
    reasoner: ReasonerConfig = Field(default_factory=ReasonerConfig)
    providers: ProvidersConfig = Field(default_factory=ProvidersConfig)
    workers: int = Field(default=4, ge=1)


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a TOML config, apply endpoint environment overrides and validate.

    Args:
        path: TOML file, or None for defaults.

    Raises:
        ConfigError: If the file is unreadable or fails validation.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}") from e

    providers = data.setdefault("providers", {})
    for kind, env in ENDPOINT_ENV.items():
        endpoint = os.environ.get(env)
        if endpoint:
            logger.debug("Endpoint for %s taken from %s", kind, env)
            providers.setdefault(kind, {})["endpoint"] = endpoint

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
