"""Bundle of the four trainable sub-networks and the shared forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
from torch import Tensor, nn

from .aligner import AlignmentNet, AlignmentOutput, UncertaintyNet, align
from .detector import DetectorHead, DetectorSpec, LandmarkMaps, detect
from .similarity import (
    DEFAULT_WINDOW_RADIUS,
    FeatureEncoder,
    SimilarityVolume,
    extract_features,
    self_similarity,
    similarity_volume,
)

GROUP_NAMES = ("encoder", "detector", "align", "uncertainty")


@dataclass
class ModelConfig:
    feature_channels: int = 64
    encoder_width: int = 32
    window_radius: int = DEFAULT_WINDOW_RADIUS
    temperature: float = 10.0
    num_landmarks: int = 10
    margin: float = 0.05
    lambda_con: float = 1.0
    lambda_sep: float = 1.0
    detector_hidden: int = 64
    align_width: int = 64
    uncertainty_width: int = 64


class JointModel(nn.Module):
    """Feature encoder + detection head + alignment and uncertainty heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        p = (2 * config.window_radius + 1) ** 2
        self.detector_spec = DetectorSpec(
            num_landmarks=config.num_landmarks,
            margin=config.margin,
            lambda_con=config.lambda_con,
            lambda_sep=config.lambda_sep,
            hidden=config.detector_hidden,
        )
        self.encoder = FeatureEncoder(config.feature_channels, config.encoder_width)
        self.detector = DetectorHead(config.feature_channels + p, self.detector_spec)
        self.align_net = AlignmentNet(p, config.align_width)
        self.uncertainty_net = UncertaintyNet(p, config.uncertainty_width)

    def group_parameters(self, name: str) -> Iterable[nn.Parameter]:
        module = {
            "encoder": self.encoder,
            "detector": self.detector,
            "align": self.align_net,
            "uncertainty": self.uncertainty_net,
        }[name]
        return module.parameters()


@dataclass
class PairOutputs:
    """Everything one forward pass produces for a single image pair."""

    features_s: Tensor
    features_t: Tensor
    self_sim_s: SimilarityVolume
    self_sim_t: SimilarityVolume
    cross_sim: SimilarityVolume
    maps_s: LandmarkMaps
    maps_t: LandmarkMaps
    alignment: AlignmentOutput


def image_to_tensor(image: np.ndarray) -> Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1) / 255.0


def forward_pair(model: JointModel, image_s: np.ndarray, image_t: np.ndarray) -> PairOutputs:
    r = model.config.window_radius
    fs = extract_features(image_to_tensor(image_s), model.encoder)
    ft = extract_features(image_to_tensor(image_t), model.encoder)
    css = self_similarity(fs, r)
    ctt = self_similarity(ft, r)
    cst = similarity_volume(fs, ft, r, kind="cross")
    maps_s = detect(fs, css, model.detector)
    maps_t = detect(ft, ctt, model.detector)
    alignment = align(cst, model.align_net, model.uncertainty_net)
    return PairOutputs(
        features_s=fs,
        features_t=ft,
        self_sim_s=css,
        self_sim_t=ctt,
        cross_sim=cst,
        maps_s=maps_s,
        maps_t=maps_t,
        alignment=alignment,
    )
