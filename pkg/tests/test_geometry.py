import math

import numpy as np
import pytest
import torch

from semalign.exceptions import (
    DegenerateWarpError,
    InvalidDimensionError,
    ShapeMismatchError,
)
from semalign.geometry import (
    AffineWarp,
    TPSWarp,
    backward_warp,
    compose_flows,
    eval_warp,
    invert_warp,
    make_grid,
    random_affine,
    random_tps,
    warp_to_flow,
)

from conftest import check_gradients


class TestMakeGrid:
    def test_corners_2x2(self):
        grid = make_grid(2, 2)
        corners = {tuple(grid[r, c].tolist()) for r in (0, 1) for c in (0, 1)}
        assert corners == {(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)}

    def test_center_3x3(self):
        assert make_grid(3, 3)[1, 1].tolist() == [0.0, 0.0]

    def test_center_odd_dims(self):
        assert make_grid(5, 7)[2, 3].tolist() == [0.0, 0.0]

    def test_monotone_axes(self):
        grid = make_grid(6, 9)
        assert (grid[:, 1:, 0] > grid[:, :-1, 0]).all()  # x along width
        assert (grid[1:, :, 1] > grid[:-1, :, 1]).all()  # y along height

    @pytest.mark.parametrize("h,w", [(1, 5), (5, 1), (0, 0)])
    def test_rejects_tiny_dims(self, h, w):
        with pytest.raises(InvalidDimensionError):
            make_grid(h, w)


class TestEvalWarp:
    def test_identity_affine(self):
        p = torch.tensor([[0.3, -0.2]], dtype=torch.float64)
        assert torch.allclose(eval_warp(AffineWarp.identity(), p), p)

    def test_pure_scaling(self):
        warp = AffineWarp(torch.tensor([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]))
        out = eval_warp(warp, torch.tensor([[0.25, 0.0]]))
        assert torch.allclose(out, torch.tensor([[0.5, 0.0]], dtype=torch.float64))

    def test_tps_zero_displacement_is_identity(self, rng):
        src = make_grid(3, 3).reshape(-1, 2)
        warp = TPSWarp(control_src=src, control_dst=src.clone())
        pts = torch.as_tensor(rng.uniform(-1, 1, size=(20, 2)))
        assert torch.allclose(eval_warp(warp, pts), pts, atol=1e-7)

    def test_tps_interpolates_control_points(self, rng):
        # Interpolation property: control points map to their displaced
        # targets; the solve itself is the independent check.
        warp = random_tps(rng, displacement_std=0.1)
        out = eval_warp(warp, warp.control_src)
        assert float((out - warp.control_dst).abs().max()) < 1e-8

    def test_coincident_controls_degenerate(self):
        src = torch.tensor([[0.0, 0.0], [0.0, 0.0], [0.5, 0.5]])
        warp = TPSWarp(control_src=src, control_dst=src + 0.1)
        with pytest.raises(DegenerateWarpError):
            eval_warp(warp, torch.zeros(1, 2))

    def test_nonfinite_affine_rejected(self):
        warp = AffineWarp(torch.tensor([[float("nan"), 0, 0], [0, 1, 0]]))
        with pytest.raises(DegenerateWarpError):
            eval_warp(warp, torch.zeros(1, 2))


class TestWarpToFlow:
    def test_identity(self):
        gt = warp_to_flow(AffineWarp.identity(), 5, 5)
        assert torch.equal(gt.flow, make_grid(5, 5))
        assert gt.validity.all()

    def test_fully_out_of_bounds_translation(self):
        # Bounds are inclusive (identity flow must be fully valid), so shift
        # strictly past the far edge.
        warp = AffineWarp(torch.tensor([[1.0, 0.0, 2.5], [0.0, 1.0, 0.0]]))
        assert not warp_to_flow(warp, 4, 4).validity.any()

    def test_rotation_matches_pointwise_eval(self):
        th = math.radians(10)
        warp = AffineWarp(
            torch.tensor([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0]])
        )
        gt = warp_to_flow(warp, 8, 8)
        grid = make_grid(8, 8)
        for r in range(8):
            for c in range(8):
                expected = eval_warp(warp, grid[r, c])
                assert torch.allclose(gt.flow[r, c], expected, atol=1e-12)

    def test_flow_agrees_with_warp_everywhere(self, rng):
        warp = random_tps(rng)
        gt = warp_to_flow(warp, 7, 9)
        assert float((gt.flow - eval_warp(warp, make_grid(7, 9))).abs().max()) < 1e-5


class TestBackwardWarp:
    def test_identity_flow_returns_field(self, rng):
        field = torch.as_tensor(rng.normal(size=(3, 6, 7)))
        assert torch.allclose(backward_warp(field, make_grid(6, 7)), field)

    def test_constant_field_any_flow(self, rng):
        field = torch.full((2, 5, 5), 3.25, dtype=torch.float64)
        flow = torch.as_tensor(rng.uniform(-1, 1, size=(5, 5, 2)))
        assert torch.allclose(backward_warp(field, flow), field)

    def test_linear_ramp_half_cell_shift(self):
        # Bilinear interpolation reproduces a linear function exactly, so a
        # half-cell shift of a ramp is a closed-form ramp offset.
        H = W = 8
        grid = make_grid(H, W)
        ramp = grid[..., 0].unsqueeze(0)  # value == x coordinate
        cell = 2.0 / (W - 1)
        flow = grid.clone()
        flow[..., 0] += cell / 2
        warped = backward_warp(ramp, flow)
        expected = (grid[..., 0] + cell / 2).clamp(max=1.0).unsqueeze(0)
        assert torch.allclose(warped, expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            backward_warp(torch.zeros(1, 4, 4), torch.zeros(5, 5, 2))

    def test_gradients_vs_finite_differences(self, rng):
        field = torch.as_tensor(rng.normal(size=(2, 5, 5)))
        # Keep sample points off the lattice where bilinear is smooth.
        flow = torch.as_tensor(rng.uniform(-0.85, 0.85, size=(5, 5, 2)))
        check_gradients(lambda: backward_warp(field, flow).pow(2).sum(), [field, flow])


class TestComposeFlows:
    def test_identity_left(self, rng):
        f2 = torch.as_tensor(rng.uniform(-0.9, 0.9, size=(6, 6, 2)))
        assert torch.allclose(compose_flows(make_grid(6, 6), f2), f2)

    def test_identity_right(self, rng):
        f1 = torch.as_tensor(rng.uniform(-0.9, 0.9, size=(6, 6, 2)))
        out = compose_flows(f1, make_grid(6, 6))
        assert torch.allclose(out, f1, atol=1e-12)

    def test_affine_composition(self, rng):
        for _ in range(10):
            A = random_affine(rng)
            B = random_affine(rng)
            fa = warp_to_flow(A, 10, 10)
            fb = warp_to_flow(B, 10, 10)
            composed = compose_flows(fa.flow, fb.flow)
            direct = eval_warp(B, fa.flow)
            inb = fa.validity & (direct.abs() <= 1.0).all(-1)
            assert float((composed - direct).abs()[inb].max()) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            compose_flows(torch.zeros(4, 4, 2), torch.zeros(5, 5, 2))


class TestWarpLaws:
    def test_randomized_identity_laws(self):
        rng = np.random.default_rng(77)
        grid = make_grid(6, 6)
        for _ in range(100):
            warp = random_affine(rng) if rng.uniform() < 0.5 else random_tps(rng)
            gt = warp_to_flow(warp, 6, 6)
            assert torch.isfinite(gt.flow).all()
            # Flow rendered from the identity of this warp's inverse-compose.
            if isinstance(warp, AffineWarp):
                inv = invert_warp(warp)
                round_trip = eval_warp(inv, eval_warp(warp, grid))
                assert float((round_trip - grid).abs().max()) < 1e-8

    def test_tps_control_reproduction_many(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            warp = random_tps(rng, control_grid=4, displacement_std=0.1)
            out = eval_warp(warp, warp.control_src)
            assert float((out - warp.control_dst).abs().max()) < 1e-8
