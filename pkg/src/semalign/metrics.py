"""Evaluation: PCK for flows and linear regression for discovered landmarks."""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch
from torch import Tensor

from .exceptions import DataError
from .geometry import bilinear_sample
from .model import JointModel, forward_pair


@dataclass
class PCKReport:
    """Fraction of keypoints transferred within alpha * max(H, W) pixels."""

    alphas: List[float]
    fractions: List[float]
    per_category: Dict[str, List[float]] = field(default_factory=dict)
    count: int = 0


@dataclass
class RegressionReport:
    """Error of a bias-free linear map from predicted to true landmarks,
    normalized by the reference distance between two designated landmarks."""

    k_used: int
    mean_error: float
    per_landmark: List[float] = field(default_factory=list)


def normalized_to_pixels(points: Tensor, height: int, width: int) -> Tensor:
    scale = torch.tensor([(width - 1) / 2.0, (height - 1) / 2.0], dtype=points.dtype)
    return (points + 1.0) * scale


def pixels_to_normalized(points: Tensor, height: int, width: int) -> Tensor:
    scale = torch.tensor([(width - 1) / 2.0, (height - 1) / 2.0], dtype=points.dtype)
    return points / scale - 1.0


def transfer_keypoints(flow: Tensor, keypoints: Tensor) -> Tensor:
    """Bilinearly sample a (H, W, 2) flow at normalized keypoints (N, 2)."""
    return bilinear_sample(flow.permute(2, 0, 1), keypoints.to(flow.dtype)).permute(1, 0)


def pck(
    flow: Tensor,
    keypoints_src: Tensor,
    keypoints_tgt: Tensor,
    alpha: float,
    image_hw: Sequence[int],
) -> float:
    """PCK for one pair: keypoints in normalized coords, threshold in pixels.

    A keypoint counts as correct when the pixel transfer error is <= (ties
    included) alpha * max(H, W).
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if keypoints_src.numel() == 0:
        raise DataError("empty keypoint set")
    H, W = image_hw
    pred = transfer_keypoints(flow, keypoints_src.to(torch.float64))
    pred_px = normalized_to_pixels(pred, H, W)
    gt_px = normalized_to_pixels(keypoints_tgt.to(torch.float64), H, W)
    err = (pred_px - gt_px).pow(2).sum(-1).sqrt()
    return float((err <= alpha * max(H, W)).double().mean())


def predict_flow(model: JointModel, image_s: np.ndarray, image_t: np.ndarray) -> Tensor:
    with torch.no_grad():
        return forward_pair(model, image_s, image_t).alignment.flow


def predict_landmarks(model: JointModel, image_s: np.ndarray, image_t: np.ndarray):
    with torch.no_grad():
        out = forward_pair(model, image_s, image_t)
        return out.maps_s.coords, out.maps_t.coords


def evaluate_pck(model: JointModel, pairs, alphas: Sequence[float]) -> PCKReport:
    """Mean PCK over pairs for each alpha, with a per-category breakdown."""
    alphas = list(alphas)
    per_pair = []
    by_cat = defaultdict(list)
    for pair in pairs:
        flow = predict_flow(model, pair.image_s, pair.image_t)
        H, W = pair.image_s.shape[:2]
        vals = [pck(flow, pair.landmarks_s, pair.landmarks_t, a, (H, W)) for a in alphas]
        per_pair.append(vals)
        category = pair.pair_id.split("_")[0] if pair.pair_id else "all"
        by_cat[category].append(vals)
    if not per_pair:
        raise DataError("no pairs to evaluate")
    fractions = np.mean(per_pair, axis=0).tolist()
    per_category = {c: np.mean(v, axis=0).tolist() for c, v in by_cat.items()}
    return PCKReport(
        alphas=alphas, fractions=fractions, per_category=per_category, count=len(per_pair)
    )


def regress_landmarks(
    predicted: Tensor,
    ground_truth: Tensor,
    train_idx: Sequence[int],
    test_idx: Sequence[int],
    reference_pair: Sequence[int] = (0, 1),
) -> RegressionReport:
    """Fit x_gt ~ W x_pred (no intercept) on train images, report test error.

    ``predicted`` is (N, K, 2), ``ground_truth`` (N, K_gt, 2). The error of
    each test image is the mean landmark distance divided by that image's
    distance between the two reference ground-truth landmarks.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    n, k, _ = pred.shape
    if len(train_idx) * 2 < 2 * k:
        raise DataError(f"need at least {k} training images for K={k}")
    X = pred[train_idx].reshape(len(train_idx), 2 * k)
    Y = gt[train_idx].reshape(len(train_idx), -1)
    W, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < 2 * k:
        warnings.warn("rank-deficient landmark design matrix; using ridge 1e-6")
        W = np.linalg.solve(X.T @ X + 1e-6 * np.eye(2 * k), X.T @ Y)
    Xt = pred[test_idx].reshape(len(test_idx), 2 * k)
    fitted = (Xt @ W).reshape(len(test_idx), -1, 2)
    gt_test = gt[test_idx]
    i, j = reference_pair
    ref = np.linalg.norm(gt_test[:, i] - gt_test[:, j], axis=-1)
    err = np.linalg.norm(fitted - gt_test, axis=-1) / ref[:, None]  # (Nt, K_gt)
    return RegressionReport(
        k_used=k,
        mean_error=float(err.mean()),
        per_landmark=err.mean(axis=0).tolist(),
    )


def write_report(path, rows: Sequence[dict]) -> None:
    """Line-delimited JSON report with (metric, alpha, value, category, n)."""
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def pck_report_rows(report: PCKReport) -> List[dict]:
    rows = [
        {"metric": "pck", "alpha": a, "value": v, "category": "all", "n": report.count}
        for a, v in zip(report.alphas, report.fractions)
    ]
    for cat, vals in report.per_category.items():
        rows.extend(
            {"metric": "pck", "alpha": a, "value": v, "category": cat, "n": report.count}
            for a, v in zip(report.alphas, vals)
        )
    return rows
