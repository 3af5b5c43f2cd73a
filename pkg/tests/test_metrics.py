import numpy as np
import pytest
import torch

from semalign.exceptions import DataError
from semalign.geometry import AffineWarp, eval_warp, make_grid, warp_to_flow
from semalign.metrics import (
    normalized_to_pixels,
    pck,
    pixels_to_normalized,
    regress_landmarks,
    transfer_keypoints,
)


def brute_force_pck(flow, kp_src, kp_tgt, alpha, hw):
    """Per-keypoint loop with explicit bilinear interpolation of the flow."""
    H, W = hw
    correct = 0
    for s, t in zip(kp_src, kp_tgt):
        x = (float(s[0]) + 1) / 2 * (W - 1)
        y = (float(s[1]) + 1) / 2 * (H - 1)
        x = min(max(x, 0.0), W - 1)
        y = min(max(y, 0.0), H - 1)
        x0, y0 = min(int(x), W - 2), min(int(y), H - 2)
        wx, wy = x - x0, y - y0
        f = flow.numpy()
        pred = (
            f[y0, x0] * (1 - wx) * (1 - wy)
            + f[y0, x0 + 1] * wx * (1 - wy)
            + f[y0 + 1, x0] * (1 - wx) * wy
            + f[y0 + 1, x0 + 1] * wx * wy
        )
        px = (pred + 1) / 2 * np.array([W - 1, H - 1])
        gt = (t.numpy() + 1) / 2 * np.array([W - 1, H - 1])
        if np.linalg.norm(px - gt) <= alpha * max(H, W):
            correct += 1
    return correct / len(kp_src)


class TestCoordinateConversion:
    def test_round_trip(self, rng):
        pts = torch.as_tensor(rng.uniform(-1, 1, size=(10, 2)))
        back = pixels_to_normalized(normalized_to_pixels(pts, 17, 23), 17, 23)
        assert float((back - pts).abs().max()) < 1e-12

    def test_corners(self):
        pts = torch.tensor([[-1.0, -1.0], [1.0, 1.0]], dtype=torch.float64)
        px = normalized_to_pixels(pts, 8, 12)
        assert px.tolist() == [[0.0, 0.0], [11.0, 7.0]]


class TestPCK:
    def test_perfect_flow_is_one(self, rng):
        warp = AffineWarp(torch.tensor([[1.0, 0.0, 0.1], [0.0, 1.0, -0.05]]))
        gt = warp_to_flow(warp, 16, 16)
        src = torch.as_tensor(rng.uniform(-0.7, 0.7, size=(12, 2)))
        tgt = eval_warp(warp, src)
        assert pck(gt.flow, src, tgt, 0.05, (16, 16)) == 1.0

    def test_identity_flow_against_large_translation(self):
        # True correspondence shifts by 0.3 * max(H, W) pixels; the identity
        # flow misses every keypoint at alpha = 0.1.
        H = W = 20
        flow = make_grid(H, W)
        src = torch.tensor([[0.0, 0.0], [-0.3, 0.2], [0.4, -0.1]], dtype=torch.float64)
        shift_norm = 0.3 * 2.0  # 0.3 * max(H,W) px in normalized units
        tgt = src + torch.tensor([shift_norm, 0.0])
        assert pck(flow, src, tgt, 0.1, (H, W)) == 0.0

    def test_threshold_is_inclusive(self):
        H = W = 11
        flow = make_grid(H, W)
        src = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
        # Error of exactly alpha * max(H, W) = 1.1 px.
        tgt = src + torch.tensor([1.1 * 2.0 / (W - 1), 0.0], dtype=torch.float64)
        assert pck(flow, src, tgt, 0.1, (H, W)) == 1.0

    def test_monotone_in_alpha(self, rng):
        flow = make_grid(14, 14) + torch.as_tensor(rng.normal(0, 0.05, size=(14, 14, 2)))
        src = torch.as_tensor(rng.uniform(-0.8, 0.8, size=(20, 2)))
        tgt = torch.as_tensor(rng.uniform(-0.8, 0.8, size=(20, 2)))
        vals = [pck(flow, src, tgt, a, (14, 14)) for a in (0.02, 0.05, 0.1, 0.2, 0.5)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_matches_brute_force(self, rng):
        for trial in range(50):
            t_rng = np.random.default_rng(trial)
            H, W = int(t_rng.integers(6, 13)), int(t_rng.integers(6, 13))
            flow = make_grid(H, W) + torch.as_tensor(t_rng.normal(0, 0.1, size=(H, W, 2)))
            src = torch.as_tensor(t_rng.uniform(-0.9, 0.9, size=(8, 2)))
            tgt = torch.as_tensor(t_rng.uniform(-0.9, 0.9, size=(8, 2)))
            alpha = float(t_rng.uniform(0.05, 0.3))
            ours = pck(flow, src, tgt, alpha, (H, W))
            oracle = brute_force_pck(flow, src, tgt, alpha, (H, W))
            assert abs(ours - oracle) < 1e-9

    def test_rejects_bad_inputs(self):
        flow = make_grid(8, 8)
        with pytest.raises(ValueError):
            pck(flow, torch.zeros(3, 2), torch.zeros(3, 2), 0.0, (8, 8))
        with pytest.raises(DataError):
            pck(flow, torch.zeros(0, 2), torch.zeros(0, 2), 0.1, (8, 8))


class TestTransferKeypoints:
    def test_samples_flow_values(self, rng):
        warp = AffineWarp(torch.tensor([[0.9, 0.0, 0.05], [0.0, 1.1, -0.02]]))
        gt = warp_to_flow(warp, 12, 12)
        src = torch.as_tensor(rng.uniform(-0.8, 0.8, size=(15, 2)))
        out = transfer_keypoints(gt.flow, src)
        expected = eval_warp(warp, src)
        assert float((out - expected).abs().max()) < 1e-9  # affine == bilinear


class TestRegression:
    def test_prediction_equals_ground_truth(self, rng):
        gt = rng.uniform(-0.8, 0.8, size=(20, 5, 2))
        rep = regress_landmarks(gt, gt, list(range(12)), list(range(12, 20)))
        assert rep.mean_error < 1e-8
        assert rep.k_used == 5

    def test_scaled_predictions_recovered(self, rng):
        gt = rng.uniform(-0.8, 0.8, size=(20, 5, 2))
        rep = regress_landmarks(gt * 2.0, gt, list(range(12)), list(range(12, 20)))
        assert rep.mean_error < 1e-8

    def test_constant_offset_hurts(self, rng):
        # A bias-free linear map cannot absorb a pure translation exactly.
        gt = rng.uniform(-0.8, 0.8, size=(30, 5, 2))
        pred = gt + np.array([0.5, 0.5])
        rep = regress_landmarks(pred, gt, list(range(20)), list(range(20, 30)))
        assert rep.mean_error > 1e-3

    def test_landmark_permutation_invariant_error(self, rng):
        gt = rng.uniform(-0.8, 0.8, size=(25, 5, 2))
        pred = gt + rng.normal(0, 0.02, size=gt.shape)
        base = regress_landmarks(pred, gt, list(range(15)), list(range(15, 25)))
        perm = rng.permutation(5)
        shuffled = regress_landmarks(pred[:, perm], gt, list(range(15)), list(range(15, 25)))
        assert abs(base.mean_error - shuffled.mean_error) < 1e-6

    def test_too_few_training_images(self, rng):
        gt = rng.uniform(-0.8, 0.8, size=(6, 5, 2))
        with pytest.raises(DataError):
            regress_landmarks(gt, gt, [0, 1], [2, 3])
