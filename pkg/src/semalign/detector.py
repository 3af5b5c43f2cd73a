"""Landmark detection head, soft-argmax and the detection losses.

The head consumes features concatenated with self-similarity scores and
emits K+1 probability maps (channel 0 is background). Landmark coordinates
are the probability-weighted expectation of the grid coordinates, so every
loss below is differentiable down to the raw scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .exceptions import (
    DegenerateChannelError,
    ShapeMismatchError,
    UndefinedLossError,
)
from .geometry import DenseGT, eval_warp, make_grid
from .similarity import SimilarityVolume

MASS_EPS = 1e-8


@dataclass
class DetectorSpec:
    """Detector hyperparameters: K landmarks, separation margin, loss weights."""

    num_landmarks: int = 10
    margin: float = 0.05  # squared-distance units in normalized coordinates
    lambda_con: float = 1.0
    lambda_sep: float = 1.0
    hidden: int = 64

    def __post_init__(self):
        if self.num_landmarks < 2:
            raise ValueError(f"need K >= 2 landmarks, got {self.num_landmarks}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class LandmarkMaps:
    """K+1 probability maps plus the K soft-argmax coordinates.

    ``prob`` is (K+1, H, W), channel-normalized; ``coords`` is (K, 2) in
    normalized units. Channel 0 of ``prob`` is background.
    """

    prob: Tensor
    coords: Tensor

    @property
    def num_landmarks(self) -> int:
        return self.prob.shape[0] - 1


class DetectorHead(nn.Module):
    """3 conv layers on (C + (2r+1)^2) channels, then a 1x1 projection."""

    def __init__(self, in_channels: int, spec: DetectorSpec):
        super().__init__()
        h = spec.hidden
        self.spec = spec
        # Group norm keeps the hidden activations' spatial contrast alive;
        # see FeatureEncoder for why that matters at this scale.
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, h, 3, padding=1),
            nn.GroupNorm(min(4, h), h),
            nn.ReLU(inplace=True),
            nn.Conv2d(h, h, 3, padding=1),
            nn.GroupNorm(min(4, h), h),
            nn.ReLU(inplace=True),
            nn.Conv2d(h, h, 3, padding=1),
            nn.GroupNorm(min(4, h), h),
            nn.ReLU(inplace=True),
            nn.Conv2d(h, spec.num_landmarks + 1, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x.unsqueeze(0)).squeeze(0)


def soft_argmax(prob: Tensor) -> Tensor:
    """Expected grid coordinate per channel of a (K, H, W) probability stack.

    Computed in double precision; variance-style terms downstream are
    numerically delicate for near-delta maps.
    """
    K, H, W = prob.shape
    p = prob.to(torch.float64)
    grid = make_grid(H, W, device=prob.device)  # (H, W, 2)
    mass = p.sum(dim=(1, 2))
    if bool((mass < MASS_EPS).any()):
        raise DegenerateChannelError("a probability channel has ~zero mass")
    num = torch.einsum("khw,hwc->kc", p, grid)
    return num / mass.unsqueeze(1)


def landmark_maps_from_scores(raw: Tensor) -> LandmarkMaps:
    """Channel softmax over K+1 raw score maps plus soft-argmax coordinates."""
    prob = torch.softmax(raw, dim=0)
    coords = soft_argmax(prob[1:])
    return LandmarkMaps(prob=prob, coords=coords)


def detect(features: Tensor, self_sim: SimilarityVolume, head: DetectorHead) -> LandmarkMaps:
    """Run the detection head on features concatenated with self-similarity."""
    if features.shape[1:] != self_sim.scores.shape[1:]:
        raise ShapeMismatchError(
            f"feature grid {tuple(features.shape[1:])} != similarity grid "
            f"{tuple(self_sim.scores.shape[1:])}"
        )
    x = torch.cat((features, self_sim.scores), dim=0)
    return landmark_maps_from_scores(head(x))


def concentration_loss(maps: LandmarkMaps) -> Tensor:
    """Probability-weighted variance of the grid coordinate per landmark.

    Zero exactly when every landmark map is a delta.
    """
    prob = maps.prob[1:].to(torch.float64)
    K, H, W = prob.shape
    grid = make_grid(H, W, device=prob.device)
    mass = prob.sum(dim=(1, 2))
    if bool((mass < MASS_EPS).any()):
        raise DegenerateChannelError("a probability channel has ~zero mass")
    centered = grid.unsqueeze(0) - maps.coords.reshape(K, 1, 1, 2)
    sq = centered.pow(2).sum(dim=-1)  # (K, H, W)
    return ((sq * prob).sum(dim=(1, 2)) / mass).sum()


def separation_loss(maps: LandmarkMaps, margin: float) -> Tensor:
    """Hinge on pairwise squared distances between landmark coordinates.

    Ordered pairs: both (k, k') and (k', k) count, so K coincident landmarks
    cost K*(K-1)*margin.
    """
    coords = maps.coords.to(torch.float64)
    d2 = (coords.unsqueeze(0) - coords.unsqueeze(1)).pow(2).sum(-1)
    hinge = (margin - d2).clamp_min(0.0)
    off_diag = ~torch.eye(coords.shape[0], dtype=torch.bool, device=coords.device)
    return hinge[off_diag].sum()


def detection_loss(maps: LandmarkMaps, spec: DetectorSpec) -> Tensor:
    """Weighted sum of concentration and separation losses."""
    return spec.lambda_con * concentration_loss(maps) + spec.lambda_sep * separation_loss(
        maps, spec.margin
    )


def equivariance_loss(maps_s: LandmarkMaps, maps_t: LandmarkMaps, gt: DenseGT) -> Tensor:
    """Squared distance between target landmarks and warped source landmarks.

    Source landmarks whose warped position leaves [-1, 1]^2 are skipped; if
    none survive the loss is undefined.
    """
    if maps_s.num_landmarks != maps_t.num_landmarks:
        raise ShapeMismatchError("landmark counts differ between the two maps")
    warped = eval_warp(gt.warp, maps_s.coords)
    valid = (warped.detach().abs() <= 1.0).all(dim=-1)
    if not bool(valid.any()):
        raise UndefinedLossError("no source landmark warps to a valid position")
    diff = maps_t.coords.to(torch.float64) - warped
    return diff.pow(2).sum(-1)[valid].sum()
