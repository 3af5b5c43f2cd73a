"""Alignment and uncertainty heads plus the alignment losses.

The alignment head turns a cross-similarity volume into a dense flow by
predicting per-cell offsets added to the identity grid; the uncertainty
head predicts a per-cell log-variance u = log(sigma) from the same volume.
The probabilistic loss divides each cell's matching cross-entropy by sigma
and adds log(sigma) as a regularizer, so unreliable cells buy themselves
out of the loss at a price.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .exceptions import (
    ShapeMismatchError,
    UndefinedLossError,
    VolumeKindError,
)
from .geometry import backward_warp, bilinear_sample, make_grid
from .similarity import SimilarityVolume, gather_windows

LOGVAR_CLAMP = 10.0
DEFAULT_TEMPERATURE = 10.0


@dataclass
class AlignmentOutput:
    """Dense flow (H, W, 2 absolute target coords) plus log-variance (H, W)."""

    flow: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.flow.shape[:2] != self.logvar.shape:
            raise ShapeMismatchError(
                f"flow grid {tuple(self.flow.shape[:2])} != "
                f"uncertainty grid {tuple(self.logvar.shape)}"
            )

    @property
    def sigma(self) -> Tensor:
        return self.logvar.exp()


class AlignmentNet(nn.Module):
    """Encoder-decoder (3 down / 3 up, skip connections) offset regressor.

    The final layer is zero-initialized so an untrained network predicts the
    identity flow.
    """

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        w = width

        def block(cin, cout, stride=1):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.ReLU(inplace=True),
            )

        self.down1 = block(in_channels, w, stride=2)
        self.down2 = block(w, w, stride=2)
        self.down3 = block(w, w, stride=2)
        self.up3 = block(w, w)
        self.up2 = block(2 * w, w)
        self.up1 = block(2 * w, w)
        self.head = nn.Conv2d(w, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, volume: Tensor) -> Tensor:
        x = volume.unsqueeze(0)
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u3 = self.up3(d3)
        u3 = nn.functional.interpolate(u3, size=d2.shape[2:], mode="bilinear", align_corners=False)
        u2 = self.up2(torch.cat((u3, d2), dim=1))
        u2 = nn.functional.interpolate(u2, size=d1.shape[2:], mode="bilinear", align_corners=False)
        u1 = self.up1(torch.cat((u2, d1), dim=1))
        u1 = nn.functional.interpolate(u1, size=x.shape[2:], mode="bilinear", align_corners=False)
        return self.head(u1).squeeze(0)  # (2, H, W) offsets


class UncertaintyNet(nn.Module):
    """Plain conv stack predicting log-variance from the cross volume."""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    def forward(self, volume: Tensor) -> Tensor:
        out = self.net(volume.unsqueeze(0)).squeeze(0).squeeze(0)
        return out.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)


def align(volume: SimilarityVolume, align_net: AlignmentNet, unc_net: UncertaintyNet) -> AlignmentOutput:
    """Predict flow and log-variance from a cross-similarity volume."""
    if volume.kind != "cross":
        raise VolumeKindError(f"alignment expects a cross volume, got {volume.kind!r}")
    offsets = align_net(volume.scores)  # (2, H, W)
    H, W = volume.grid_size
    identity = make_grid(H, W, dtype=offsets.dtype, device=offsets.device)
    flow = identity + offsets.permute(1, 2, 0)
    logvar = unc_net(volume.scores)
    return AlignmentOutput(flow=flow, logvar=logvar)


def matching_cross_entropy(
    fs: Tensor, ft: Tensor, flow: Tensor, radius: int, temperature: float = DEFAULT_TEMPERATURE
) -> Tensor:
    """Per-cell cross-entropy of matching each source cell to itself in the
    flow-warped target features.

    The candidate set is the (2r+1)^2 window around the cell in the warped
    target grid; the center candidate is the positive class. Returns (H, W).
    """
    if fs.shape != ft.shape:
        raise ShapeMismatchError(f"feature shapes differ: {tuple(fs.shape)} vs {tuple(ft.shape)}")
    warped = backward_warp(ft, flow.to(ft.dtype))  # (C, H, W)
    candidates = gather_windows(warped, radius)  # (C, P, H, W)
    logits = temperature * (fs.unsqueeze(1) * candidates).sum(dim=0)  # (P, H, W)
    logp = torch.log_softmax(logits, dim=0)
    center = logits.shape[0] // 2
    return -logp[center]


def alignment_prob_loss(
    fs: Tensor,
    ft: Tensor,
    out: AlignmentOutput,
    radius: int,
    temperature: float = DEFAULT_TEMPERATURE,
) -> Tensor:
    """Uncertainty-weighted matching loss, mean over cells.

    per cell: exp(-u) * CE + u, with u the predicted log-variance. With
    u = 0 this is the plain cross-entropy.
    """
    ce = matching_cross_entropy(fs, ft, out.flow, radius, temperature)
    u = out.logvar.to(ce.dtype)
    return (torch.exp(-u) * ce + u).mean()


def anchor_loss(out: AlignmentOutput, anchors_src: Tensor, anchors_dst: Tensor) -> Tensor:
    """Mean squared distance between flow-transferred anchors and targets.

    The flow is sampled bilinearly at each source anchor position.
    """
    if anchors_src.numel() == 0:
        raise UndefinedLossError("anchor set is empty")
    if anchors_src.shape != anchors_dst.shape:
        raise ShapeMismatchError("anchor source/target shapes differ")
    flow_ch = out.flow.permute(2, 0, 1)  # (2, H, W)
    transferred = bilinear_sample(flow_ch, anchors_src.to(out.flow.dtype)).permute(1, 0)
    return (transferred - anchors_dst.to(transferred.dtype)).pow(2).sum(-1).mean()
