"""Flat ``key = value`` configuration with validation.

Values resolve as defaults < config file < command-line overrides. Keys are
``section.name``; each maps onto a field of one of the component configs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable

from .densify import DensifyConfig
from .features import FeatureConfig
from .mapping import MapConfig
from .tracking import TrackConfig
from .two_view import GeometryConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InitConfig:
    parallax_deg: float = 3.0
    min_points: int = 150
    ransac_iters: int = 200
    max_frames: int = 30


@dataclass(frozen=True)
class DepthConfig:
    """Settings for the depth-completed mode."""

    work_scale: int = 2
    min_conf: float = 1e-3
    spawn: bool = True
    max_spawn: int = 300
    edge_ratio: float = 0.05


def _positive(x):
    return x > 0


def _non_negative(x):
    return x >= 0


def _unit(x):
    return 0 < x <= 1


def _odd(x):
    return x > 0 and x % 2 == 1


# section -> (config class, {field: validator})
_SECTIONS: dict[str, tuple[type, dict[str, Callable[[Any], bool]]]] = {
    "features": (
        FeatureConfig,
        {
            "n_levels": _positive,
            "scale_factor": lambda x: x > 1,
            "fast_threshold": _positive,
            "n_features": _positive,
            "grid_cols": _positive,
            "grid_rows": _positive,
            "polar_band": lambda x: 0 <= x < 0.5,
            "cell_quota": _non_negative,
            "match_ratio": _unit,
            "max_hamming": lambda x: 0 <= x <= 256,
        },
    ),
    "geom": (
        GeometryConfig,
        {
            "epipole_angle_deg": _non_negative,
            "epiplane_angle_deg": _positive,
            "reproj_angle_deg": _positive,
            "parallax_deg": _non_negative,
            "min_range_m": _non_negative,
        },
    ),
    "track": (
        TrackConfig,
        {
            "huber_deg": _positive,
            "inlier_deg": _positive,
            "min_inliers": lambda x: x >= 6,
            "kf_ratio": _unit,
            "kf_min_interval": _non_negative,
            "kf_max_interval": _positive,
            "search_deg": _positive,
            "refine_search_deg": _positive,
            "match_max_hamming": lambda x: 0 <= x <= 256,
        },
    ),
    "map": (
        MapConfig,
        {
            "covis_threshold": _positive,
            "neighbors": _positive,
            "fuse_deg": _positive,
            "fuse_hamming": lambda x: 0 <= x <= 256,
            "match_hamming": lambda x: 0 <= x <= 256,
            "match_ratio": _unit,
            "ba_window": lambda x: x >= 2,
            "ba_iters": _non_negative,
            "depth_weight": _non_negative,
            "cull_ratio": lambda x: 0 <= x <= 1,
            "cull_grace": _non_negative,
            "min_parallax_deg": _non_negative,
        },
    ),
    "densify": (
        DensifyConfig,
        {
            "kernel_size": _odd,
            "kernel_sigma": _positive,
            "levels": _positive,
            "c_min": lambda x: 0 <= x < 1,
            "max_iters": _non_negative,
            "gamma": _unit,
            "refine_sigma_s": _positive,
            "refine_sigma_r": _positive,
            "refine_passes": _non_negative,
        },
    ),
    "init": (
        InitConfig,
        {
            "parallax_deg": _positive,
            "min_points": lambda x: x >= 6,
            "ransac_iters": _positive,
            "max_frames": lambda x: x >= 2,
        },
    ),
    "dc": (
        DepthConfig,
        {
            "work_scale": lambda x: x in (1, 2, 4),
            "min_conf": _non_negative,
            "spawn": lambda x: True,
            "max_spawn": _non_negative,
            "edge_ratio": _positive,
        },
    ),
}


def _field_types(cls) -> dict[str, type]:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(cls)}


def known_keys() -> list[str]:
    return sorted(f"{sec}.{name}" for sec, (_, fields) in _SECTIONS.items() for name in fields)


def _parse_value(key: str, raw: Any, typ: type):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from exc
    return text


@dataclass(frozen=True)
class Settings:
    features: FeatureConfig = FeatureConfig()
    geom: GeometryConfig = GeometryConfig()
    track: TrackConfig = TrackConfig()
    map: MapConfig = MapConfig()
    densify: DensifyConfig = DensifyConfig()
    init: InitConfig = InitConfig()
    dc: DepthConfig = DepthConfig()


def parse_lines(lines) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_file(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh)


def build_settings(file_values: dict | None = None, overrides: dict | None = None) -> Settings:
    """Merge file values and overrides onto defaults, validating every key."""
    merged: dict[str, Any] = {}
    merged.update(file_values or {})
    merged.update(overrides or {})
    per_section: dict[str, dict[str, Any]] = {sec: {} for sec in _SECTIONS}
    for key, raw in merged.items():
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = key.split(".", 1)
        if sec not in _SECTIONS or name not in _SECTIONS[sec][1]:
            raise ConfigError(f"unknown config key {key!r}")
        cls, validators = _SECTIONS[sec]
        value = _parse_value(key, raw, _field_types(cls)[name])
        if not validators[name](value):
            raise ConfigError(f"{key}: value {value!r} out of range")
        per_section[sec][name] = value
    parts = {sec: cls(**per_section[sec]) for sec, (cls, _) in _SECTIONS.items()}
    s = Settings(**parts)
    if s.track.kf_min_interval > s.track.kf_max_interval:
        raise ConfigError("track.kf_min_interval exceeds track.kf_max_interval")
    return s


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
