"""Configuration dataclasses and dotted-key access.

Every tunable lives on one of the dataclasses below and is addressable by a
dotted key such as ``fusion.voxel_size`` or ``semantics.prior_alpha``, which
is also how manifest sections map onto configs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError

WEIGHT_FNS = ("constant_one", "linear_dropoff")
CLOSED_FUSION_MODES = ("bayes", "last_wins")


@dataclass
class TreeConfig:
    """Grid topology: leaves of (2**leaf_log2)**3 voxels under internal nodes
    of (2**internal_log2)**3 children under a hash-map root."""

    leaf_log2: int = 3
    internal_log2: int = 4

    def validate(self) -> None:
        if not (1 <= self.leaf_log2 <= 6):
            raise ConfigError(f"leaf_log2 out of range [1,6]: {self.leaf_log2}")
        if not (1 <= self.internal_log2 <= 6):
            raise ConfigError(f"internal_log2 out of range [1,6]: {self.internal_log2}")


@dataclass
class FusionConfig:
    voxel_size: float = 0.05
    truncation: float = 0.1
    weight_fn: str = "constant_one"
    space_carving: bool = False
    max_range: float = 15.0

    def validate(self) -> None:
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.truncation <= 0:
            raise ConfigError(f"truncation must be positive, got {self.truncation}")
        if self.weight_fn not in WEIGHT_FNS:
            raise ConfigError(f"weight_fn must be one of {WEIGHT_FNS}, got {self.weight_fn!r}")
        if self.max_range <= 0:
            raise ConfigError(f"max_range must be positive, got {self.max_range}")


@dataclass
class ClosedSetConfig:
    """Per-voxel Dirichlet over a fixed label set {1..num_classes}.

    Only integer observation counts are stored; the symmetric prior is added
    back when concentrations are read, which keeps fusion exactly independent
    of frame order.
    """

    num_classes: int = 0
    prior_alpha: float = 0.001
    fusion: str = "bayes"
    count_dtype: str = "float32"

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.prior_alpha <= 0:
            raise ConfigError(f"prior_alpha must be positive, got {self.prior_alpha}")
        if self.fusion not in CLOSED_FUSION_MODES:
            raise ConfigError(
                f"fusion must be one of {CLOSED_FUSION_MODES}, got {self.fusion!r}"
            )
        _np_dtype(self.count_dtype)


@dataclass
class OpenSetConfig:
    """Per-voxel Normal-Inverse-Gamma posterior over a feature embedding.

    The stored state per voxel is (mean m, per-dimension scale beta); the
    remaining NIG parameters are tied to integration weight W as lambda = W
    (floored) and 2*nu = W, so they are never stored.
    """

    feature_dim: int = 0
    prior_beta: float = 1e-3
    lambda_floor: float = 1e-3
    confidence_threshold: float = 0.1
    temperature: float = 0.01
    state_dtype: str = "float32"

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.prior_beta <= 0:
            raise ConfigError(f"prior_beta must be positive, got {self.prior_beta}")
        if self.lambda_floor <= 0:
            raise ConfigError(f"lambda_floor must be positive, got {self.lambda_floor}")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ConfigError(
                f"confidence_threshold must be in [0,1], got {self.confidence_threshold}"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        _np_dtype(self.state_dtype)


@dataclass
class CameraConfig:
    """Pinhole intrinsics for depth/feature rasters."""

    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    width: int = 0
    height: int = 0
    depth_scale: float = 1.0
    stride: int = 1

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("fx and fy must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("raster dimensions must be positive")
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")


_SECTIONS = {
    "tree": TreeConfig,
    "fusion": FusionConfig,
    "semantics_closed": ClosedSetConfig,
    "semantics_open": OpenSetConfig,
    "camera": CameraConfig,
}


def _np_dtype(name: str) -> np.dtype:
    try:
        dt = np.dtype(name)
    except TypeError as exc:
        raise ConfigError(f"unknown dtype {name!r}") from exc
    if dt.kind != "f":
        raise ConfigError(f"state dtype must be floating point, got {name!r}")
    return dt


def coerce_field(obj, name: str, raw):
    """Assign ``raw`` (possibly a string) to a dataclass field with type
    coercion.  Unknown names raise ConfigError."""
    for f in fields(obj):
        if f.name != name:
            continue
        val = raw
        if isinstance(raw, str):
            if f.type in ("int", int):
                try:
                    val = int(raw)
                except ValueError as exc:
                    raise ConfigError(f"{name}: expected int, got {raw!r}") from exc
            elif f.type in ("float", float):
                try:
                    val = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"{name}: expected float, got {raw!r}") from exc
            elif f.type in ("bool", bool):
                low = raw.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    val = True
                elif low in ("0", "false", "no", "off"):
                    val = False
                else:
                    raise ConfigError(f"{name}: expected bool, got {raw!r}")
        setattr(obj, name, val)
        return
    raise ConfigError(f"{type(obj).__name__} has no field {name!r}")


def set_dotted(configs: dict, dotted_key: str, raw) -> None:
    """Apply 'section.field=value' to a {section: dataclass} bundle."""
    if "." not in dotted_key:
        raise ConfigError(f"expected section.field, got {dotted_key!r}")
    section, name = dotted_key.split(".", 1)
    if section not in configs:
        raise ConfigError(f"unknown config section {section!r}")
    coerce_field(configs[section], name, raw)


def as_flat_dict(configs: dict) -> dict:
    out = {}
    for section, cfg in configs.items():
        for f in fields(cfg):
            out[f"{section}.{f.name}"] = getattr(cfg, f.name)
    return out


def clone(cfg):
    return dataclasses.replace(cfg)
