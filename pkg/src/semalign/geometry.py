"""Coordinate grids, parametric warps, dense flows and differentiable warping.

Conventions used everywhere in this package:

* Coordinates are normalized so each image axis spans ``[-1, 1]``; a grid
  cell ``(row, col)`` of an ``H x W`` grid sits at
  ``(x, y) = (-1 + 2*col/(W-1), -1 + 2*row/(H-1))``.
* Points are ``(x, y)`` pairs (x along width, y along height), stored in the
  last tensor dimension.
* A flow field holds *absolute* target coordinates per source cell, not
  offsets. The aligner adds its predicted offsets to the identity grid
  before building a flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import torch
from torch import Tensor

from .exceptions import (
    DegenerateWarpError,
    InvalidDimensionError,
    ShapeMismatchError,
)

TPS_REGULARIZATION = 1e-9


def make_grid(height: int, width: int, *, dtype=torch.float64, device=None) -> Tensor:
    """Normalized coordinate grid of shape (H, W, 2) with (x, y) entries.

    Corner cells are exactly (-1, -1) and (1, 1); both axes are monotone.
    """
    if height < 2 or width < 2:
        raise InvalidDimensionError(f"grid dims must be >= 2, got {height}x{width}")
    # (2i - (n-1)) / (n-1) is exactly 0 at the center of odd axes and
    # exactly +-1 at the corners, unlike linspace.
    ys = (2 * torch.arange(height, dtype=dtype, device=device) - (height - 1)) / (height - 1)
    xs = (2 * torch.arange(width, dtype=dtype, device=device) - (width - 1)) / (width - 1)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((xx, yy), dim=-1)


@dataclass(frozen=True)
class AffineWarp:
    """2x3 affine map p -> A @ [x, y, 1] in normalized coordinates."""

    matrix: Tensor  # (2, 3)

    @staticmethod
    def identity(dtype=torch.float64) -> "AffineWarp":
        return AffineWarp(torch.eye(2, 3, dtype=dtype))

    def inverse(self) -> "AffineWarp":
        A = self.matrix[:, :2]
        t = self.matrix[:, 2]
        Ainv = torch.linalg.inv(A)
        return AffineWarp(torch.cat((Ainv, (-Ainv @ t).unsqueeze(1)), dim=1))


@dataclass(frozen=True)
class TPSWarp:
    """Thin-plate-spline warp defined by control points and their targets.

    ``control_src`` anchors the spline; ``control_dst`` are the displaced
    positions. Coefficients are solved once, lazily, from the standard
    radial-basis system with a small diagonal regularizer.
    """

    control_src: Tensor  # (N, 2)
    control_dst: Tensor  # (N, 2)

    def coefficients(self) -> Tensor:
        src = self.control_src.to(torch.float64)
        dst = self.control_dst.to(torch.float64)
        n = src.shape[0]
        d2 = _sqdist(src, src)
        if bool((d2 + torch.eye(n, dtype=torch.float64) < 1e-12).any()):
            raise DegenerateWarpError("coincident TPS control points")
        K = _tps_kernel(d2) + TPS_REGULARIZATION * torch.eye(n, dtype=torch.float64)
        P = torch.cat((torch.ones(n, 1, dtype=torch.float64), src), dim=1)
        L = torch.zeros(n + 3, n + 3, dtype=torch.float64)
        L[:n, :n] = K
        L[:n, n:] = P
        L[n:, :n] = P.T
        rhs = torch.zeros(n + 3, 2, dtype=torch.float64)
        rhs[:n] = dst
        try:
            coef = torch.linalg.solve(L, rhs)
        except RuntimeError as exc:  # singular system
            raise DegenerateWarpError(f"singular TPS system: {exc}") from exc
        return coef  # (N+3, 2)


ParametricWarp = Union[AffineWarp, TPSWarp]


@dataclass(frozen=True)
class DenseGT:
    """A warp together with its rendered flow and in-bounds validity mask."""

    warp: ParametricWarp
    flow: Tensor  # (H, W, 2)
    validity: Tensor  # (H, W) bool


def _sqdist(a: Tensor, b: Tensor) -> Tensor:
    # Squared distances without the sqrt of cdist (keeps gradients finite
    # when a query coincides with a control point).
    return (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1)


def _tps_kernel(d2: Tensor) -> Tensor:
    # U(r) = r^2 log r^2, with U(0) = 0.
    return torch.where(d2 > 0, d2 * torch.log(d2.clamp_min(1e-300)), torch.zeros_like(d2))


def eval_warp(warp: ParametricWarp, points) -> Tensor:
    """Evaluate a parametric warp at points of shape (..., 2)."""
    pts = torch.as_tensor(points, dtype=torch.float64)
    if pts.shape[-1] != 2:
        raise ShapeMismatchError(f"points must end in dim 2, got {tuple(pts.shape)}")
    if isinstance(warp, AffineWarp):
        if not torch.isfinite(warp.matrix).all():
            raise DegenerateWarpError("non-finite affine parameters")
        A = warp.matrix.to(torch.float64)
        return pts @ A[:, :2].T + A[:, 2]
    if isinstance(warp, TPSWarp):
        coef = warp.coefficients()
        src = warp.control_src.to(torch.float64)
        flat = pts.reshape(-1, 2)
        d2 = _sqdist(flat, src)
        U = _tps_kernel(d2)  # (M, N)
        n = src.shape[0]
        out = coef[n] + flat @ coef[n + 1 :] + U @ coef[:n]
        return out.reshape(pts.shape)
    raise TypeError(f"unsupported warp type {type(warp)!r}")


def warp_to_flow(warp: ParametricWarp, height: int, width: int) -> DenseGT:
    """Render a parametric warp into a dense flow field plus validity mask."""
    grid = make_grid(height, width)
    flow = eval_warp(warp, grid)
    validity = (flow.abs() <= 1.0).all(dim=-1)
    return DenseGT(warp=warp, flow=flow, validity=validity)


def bilinear_sample(field: Tensor, points: Tensor) -> Tensor:
    """Bilinearly sample a (C, H, W) field at normalized points (..., 2).

    Sampling positions outside [-1, 1] clamp to the border. Differentiable
    with respect to both the field and the points.
    """
    if field.dim() != 3:
        raise ShapeMismatchError(f"field must be (C, H, W), got {tuple(field.shape)}")
    if points.shape[-1] != 2:
        raise ShapeMismatchError(f"points must end in dim 2, got {tuple(points.shape)}")
    C, H, W = field.shape
    pts = points.reshape(-1, 2)
    # Normalized -> continuous pixel coordinates, clamped to the border.
    x = (pts[:, 0] + 1.0) * 0.5 * (W - 1)
    y = (pts[:, 1] + 1.0) * 0.5 * (H - 1)
    x = x.clamp(0.0, float(W - 1))
    y = y.clamp(0.0, float(H - 1))
    x0 = x.detach().floor().long().clamp(0, W - 2)
    y0 = y.detach().floor().long().clamp(0, H - 2)
    wx = x - x0
    wy = y - y0
    f = field.reshape(C, -1)
    idx00 = y0 * W + x0
    v00 = f[:, idx00]
    v01 = f[:, idx00 + 1]
    v10 = f[:, idx00 + W]
    v11 = f[:, idx00 + W + 1]
    top = v00 + (v01 - v00) * wx
    bot = v10 + (v11 - v10) * wx
    out = top + (bot - top) * wy  # (C, M)
    return out.reshape((C,) + points.shape[:-1])


def backward_warp(field: Tensor, flow: Tensor) -> Tensor:
    """Warp a (C, H, W) field by sampling it at the flow's target coords.

    ``out[:, i] = bilinear_sample(field, flow[i])`` with border clamping.
    """
    if field.dim() != 3 or flow.dim() != 3 or flow.shape[-1] != 2:
        raise ShapeMismatchError(
            f"expected field (C,H,W) and flow (H,W,2), got {tuple(field.shape)} / {tuple(flow.shape)}"
        )
    if field.shape[1:] != flow.shape[:2]:
        raise ShapeMismatchError(
            f"field grid {tuple(field.shape[1:])} != flow grid {tuple(flow.shape[:2])}"
        )
    return bilinear_sample(field, flow)


def compose_flows(f1: Tensor, f2: Tensor) -> Tensor:
    """Flow composition: result[i] = f2 sampled at f1[i]."""
    if f1.shape != f2.shape:
        raise ShapeMismatchError(f"flow shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    sampled = bilinear_sample(f2.permute(2, 0, 1), f1)  # (2, H, W)
    return sampled.permute(1, 2, 0)


def random_affine(
    rng,
    *,
    max_rotation_deg: float = 25.0,
    scale_range: Sequence[float] = (0.8, 1.25),
    max_translation: float = 0.2,
    dtype=torch.float64,
) -> AffineWarp:
    """Sample a random rotation/scale/translation affine warp."""
    import math

    theta = math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
    s = rng.uniform(scale_range[0], scale_range[1])
    tx = rng.uniform(-max_translation, max_translation)
    ty = rng.uniform(-max_translation, max_translation)
    c, si = math.cos(theta), math.sin(theta)
    mat = torch.tensor(
        [[s * c, -s * si, tx], [s * si, s * c, ty]], dtype=dtype
    )
    return AffineWarp(mat)


def random_tps(
    rng,
    *,
    control_grid: int = 3,
    displacement_std: float = 0.08,
) -> TPSWarp:
    """Sample a TPS warp on a control grid with Gaussian displacements."""
    src = make_grid(control_grid, control_grid).reshape(-1, 2)
    disp = torch.as_tensor(
        rng.normal(0.0, displacement_std, size=(src.shape[0], 2)), dtype=torch.float64
    )
    return TPSWarp(control_src=src, control_dst=src + disp)


def invert_warp(warp: ParametricWarp) -> ParametricWarp:
    """Analytic inverse for affine; control-point-swap pseudo-inverse for TPS.

    The TPS pseudo-inverse is exact at the control points and approximate
    elsewhere; the error is second order in the control displacements.
    """
    if isinstance(warp, AffineWarp):
        return warp.inverse()
    if isinstance(warp, TPSWarp):
        return TPSWarp(control_src=warp.control_dst, control_dst=warp.control_src)
    raise TypeError(f"unsupported warp type {type(warp)!r}")
