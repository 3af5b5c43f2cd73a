"""Feature extraction and windowed cosine-similarity volumes.

Features are L2-normalized along channels, so a plain inner product between
cells is a cosine similarity. Match scores against the ``(2r+1)^2`` window
candidates are then renormalized per cell by the L2 norm of the raw score
vector, which down-weights cells with many competing high scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .exceptions import ShapeMismatchError, WindowError

ZERO_NORM_EPS = 1e-8
DEFAULT_WINDOW_RADIUS = 5


@dataclass
class SimilarityVolume:
    """Per-cell windowed match scores.

    ``scores`` has shape (P, H, W) with P = (2r+1)^2 window offsets in
    row-major (dy, dx) order; the window center sits at index P // 2.
    ``kind`` is "self" or "cross".
    """

    scores: Tensor
    radius: int
    kind: str

    @property
    def grid_size(self):
        return self.scores.shape[1], self.scores.shape[2]


class FeatureEncoder(nn.Module):
    """Small trainable convolutional encoder, stride 4 image -> feature grid.

    Stands in for a pretrained deep backbone at desk scale; any module that
    maps (3, H, W) -> (C, ceil(H/4), ceil(W/4)) can be plugged in instead.
    """

    def __init__(self, channels: int = 64, width: int = 32):
        super().__init__()
        self.downsample = 4
        self.channels = channels
        # Group norm after each hidden conv: without it the spatially
        # constant (brightness) component compounds through the stack while
        # local contrast decays, and the normalized features end up nearly
        # identical at every cell.
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GroupNorm(min(4, width), width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.GroupNorm(min(4, 2 * width), 2 * width),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 3, stride=1, padding=1),
            nn.GroupNorm(min(4, 2 * width), 2 * width),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, channels, 3, stride=1, padding=1),
        )

    def forward(self, image: Tensor) -> Tensor:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ShapeMismatchError(f"expected (3, H, W) image, got {tuple(image.shape)}")
        # Center the input: with all-positive pixels the shared brightness
        # component dominates every random conv at init and, after channel
        # L2 normalization, feature directions barely vary across space.
        return self.net(image.unsqueeze(0) - 0.5).squeeze(0)


def normalize_features(features: Tensor) -> Tensor:
    """L2-normalize a (C, H, W) feature map along channels.

    Cells with raw norm below ``ZERO_NORM_EPS`` become zero vectors instead
    of blowing up gradients.
    """
    norm = features.pow(2).sum(dim=0, keepdim=True).sqrt()
    safe = torch.where(norm > ZERO_NORM_EPS, norm, torch.ones_like(norm))
    out = features / safe
    return torch.where(norm > ZERO_NORM_EPS, out, torch.zeros_like(out))


def extract_features(image: Tensor, encoder: nn.Module) -> Tensor:
    """Run the encoder, remove each channel's spatial mean, L2-normalize.

    The mean removal matters: a conv stack accumulates a large spatially
    constant component, and without it the normalized feature directions
    are nearly identical everywhere, so every cosine score saturates and
    similarity volumes carry no structure (the ZNCC trick).
    """
    raw = encoder(image)
    return normalize_features(raw - raw.mean(dim=(1, 2), keepdim=True))


def window_indices(height: int, width: int, radius: int, device=None):
    """Clamped gather indices for every (dy, dx) window offset.

    Returns (iy, ix), each of shape (P, H, W); positions falling outside the
    grid are clamped to the border so every window has exactly (2r+1)^2
    candidates.
    """
    if radius < 1:
        raise WindowError(f"window radius must be >= 1, got {radius}")
    if 2 * radius + 1 > min(height, width):
        raise WindowError(
            f"window span {2 * radius + 1} exceeds grid {height}x{width}"
        )
    offs = torch.arange(-radius, radius + 1, device=device)
    dy, dx = torch.meshgrid(offs, offs, indexing="ij")
    dy = dy.reshape(-1, 1, 1)
    dx = dx.reshape(-1, 1, 1)
    ys = torch.arange(height, device=device).reshape(1, -1, 1)
    xs = torch.arange(width, device=device).reshape(1, 1, -1)
    iy = (ys + dy).clamp(0, height - 1).expand(-1, height, width)
    ix = (xs + dx).clamp(0, width - 1).expand(-1, height, width)
    return iy, ix


def gather_windows(field: Tensor, radius: int) -> Tensor:
    """Stack the clamped (2r+1)^2 window candidates of a (C, H, W) field.

    Returns shape (C, P, H, W).
    """
    C, H, W = field.shape
    iy, ix = window_indices(H, W, radius, device=field.device)
    return field[:, iy, ix]


def renormalize_scores(raw: Tensor) -> Tensor:
    """L2-renormalize raw scores (P, H, W) over the candidate axis."""
    norm = raw.pow(2).sum(dim=0, keepdim=True).sqrt()
    safe = torch.where(norm > ZERO_NORM_EPS, norm, torch.ones_like(norm))
    out = raw / safe
    return torch.where(norm > ZERO_NORM_EPS, out, torch.zeros_like(out))


def similarity_volume(fa: Tensor, fb: Tensor, radius: int, kind: str = "cross") -> SimilarityVolume:
    """Windowed cosine similarity of two normalized (C, H, W) feature maps.

    raw[p, i] = <fa_i, fb_j(p)> for the window candidate j(p) around i in
    ``fb``; scores are then L2-renormalized over the candidates per cell.
    """
    if fa.shape != fb.shape:
        raise ShapeMismatchError(f"feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    windows = gather_windows(fb, radius)  # (C, P, H, W)
    raw = (fa.unsqueeze(1) * windows).sum(dim=0)  # (P, H, W)
    return SimilarityVolume(scores=renormalize_scores(raw), radius=radius, kind=kind)


def self_similarity(features: Tensor, radius: int) -> SimilarityVolume:
    """Similarity of a feature map with itself (local structure descriptor)."""
    vol = similarity_volume(features, features, radius, kind="self")
    return vol
