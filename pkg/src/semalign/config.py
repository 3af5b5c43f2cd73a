"""Flat key=value configuration with documented defaults.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Every key mirrors a default below; unknown keys are rejected.
"""

from __future__ import annotations

from typing import Dict

from .datagen import PhotometricParams, StreamConfig, WarpParams
from .exceptions import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

# Every tunable of the system, with its default.
DEFAULTS: Dict[str, object] = {
    # model
    "feature_channels": 64,
    "encoder_width": 32,
    "window_radius": 5,
    "temperature": 10.0,
    "num_landmarks": 10,
    "margin": 0.05,
    "lambda_con": 1.0,
    "lambda_sep": 1.0,
    "detector_hidden": 64,
    "align_width": 64,
    "uncertainty_width": 64,
    # optimization
    "batch_size": 16,
    "learning_rate": 1e-3,
    "epochs_per_phase": 2,
    "steps_per_epoch": 25,
    "anchor_grid": 5,
    "pretrain_steps": 300,
    "alternations": 4,
    # data generation
    "image_size": 64,
    "categories": 4,
    "vertex_count": 6,
    "k_landmarks": 6,
    "center_jitter": 0.12,
    "max_rotation_deg": 25.0,
    "scale_min": 0.8,
    "scale_max": 1.25,
    "max_translation": 0.2,
    "tps_control_grid": 3,
    "tps_displacement_std": 0.08,
    "validity_floor": 0.6,
    "brightness": 0.15,
    "contrast": 0.15,
    "noise_std": 0.02,
    "occlusion_prob": 0.0,
    "occlusion_area_min": 0.05,
    "occlusion_area_max": 0.15,
    "appearance_change": False,
    "num_pairs": 100,
    "split_train": 0.7,
    "split_val": 0.2,
    "split_test": 0.1,
    # evaluation
    "data_dir": "",
    "alphas": "0.05,0.1,0.15",
    "reference_landmark_a": 0,
    "reference_landmark_b": 1,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc
    return raw


def load_config(path=None, overrides: Dict[str, object] | None = None) -> Dict[str, object]:
    """Defaults, optionally updated from a file and a dict of overrides."""
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path) as f:
                lines = f.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = []
        for lineno, line in enumerate(lines, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in DEFAULTS:
                unknown.append(key)
                continue
            cfg[key] = _coerce(key, raw)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if overrides:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config keys: {key}")
            cfg[key] = value
    return cfg


def model_config(cfg: Dict[str, object]) -> ModelConfig:
    return ModelConfig(
        feature_channels=cfg["feature_channels"],
        encoder_width=cfg["encoder_width"],
        window_radius=cfg["window_radius"],
        temperature=cfg["temperature"],
        num_landmarks=cfg["num_landmarks"],
        margin=cfg["margin"],
        lambda_con=cfg["lambda_con"],
        lambda_sep=cfg["lambda_sep"],
        detector_hidden=cfg["detector_hidden"],
        align_width=cfg["align_width"],
        uncertainty_width=cfg["uncertainty_width"],
    )


def train_config(cfg: Dict[str, object]) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        epochs_per_phase=cfg["epochs_per_phase"],
        steps_per_epoch=cfg["steps_per_epoch"],
        anchor_grid=cfg["anchor_grid"],
    )


def stream_config(cfg: Dict[str, object], *, joint: bool = False) -> StreamConfig:
    """Synthetic-pair stream; with joint=True the target view changes texture
    (cross-instance appearance) in addition to geometry."""
    return StreamConfig(
        categories=cfg["categories"],
        image_size=cfg["image_size"],
        vertex_count=cfg["vertex_count"],
        k_landmarks=cfg["k_landmarks"],
        center_jitter=cfg["center_jitter"],
        warp=WarpParams(
            max_rotation_deg=cfg["max_rotation_deg"],
            scale_range=(cfg["scale_min"], cfg["scale_max"]),
            max_translation=cfg["max_translation"],
            tps_control_grid=cfg["tps_control_grid"],
            tps_displacement_std=cfg["tps_displacement_std"],
            validity_floor=cfg["validity_floor"],
        ),
        photometric=PhotometricParams(
            brightness=cfg["brightness"],
            contrast=cfg["contrast"],
            noise_std=cfg["noise_std"],
            occlusion_prob=cfg["occlusion_prob"],
            occlusion_area=(cfg["occlusion_area_min"], cfg["occlusion_area_max"]),
        ),
        appearance_change=joint or cfg["appearance_change"],
    )


def parse_alphas(cfg: Dict[str, object]):
    try:
        return [float(a) for a in str(cfg["alphas"]).split(",") if a.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad alphas list {cfg['alphas']!r}") from exc
