import numpy as np
import pytest
import torch

from semalign.exceptions import ShapeMismatchError, WindowError
from semalign.similarity import (
    FeatureEncoder,
    extract_features,
    normalize_features,
    self_similarity,
    similarity_volume,
)

from conftest import check_gradients


def brute_force_volume(fa, fb, r):
    """Naive O(HW * (2r+1)^2) double loop, the oracle for the vectorized path."""
    C, H, W = fa.shape
    P = (2 * r + 1) ** 2
    raw = torch.zeros(P, H, W, dtype=fa.dtype)
    for y in range(H):
        for x in range(W):
            p = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), H - 1)
                    xx = min(max(x + dx, 0), W - 1)
                    raw[p, y, x] = (fa[:, y, x] * fb[:, yy, xx]).sum()
                    p += 1
    norm = raw.pow(2).sum(0, keepdim=True).sqrt()
    out = torch.where(norm > 1e-8, raw / norm.clamp_min(1e-30), torch.zeros_like(raw))
    return out


def random_unit_features(rng, c, h, w):
    return normalize_features(torch.as_tensor(rng.normal(size=(c, h, w))))


class TestNormalizeFeatures:
    def test_unit_norm(self, rng):
        f = normalize_features(torch.as_tensor(rng.normal(size=(8, 5, 5))))
        norms = f.pow(2).sum(0).sqrt()
        assert float((norms - 1).abs().max()) < 1e-5

    def test_zero_cells_stay_zero(self):
        f = torch.zeros(4, 3, 3)
        f[:, 0, 0] = 1e-9  # below the guard threshold
        out = normalize_features(f)
        assert (out[:, 0, 0] == 0).all()


class TestEncoder:
    def test_shape_contract(self):
        torch.manual_seed(0)
        enc = FeatureEncoder(channels=16, width=8)
        img = torch.rand(3, 64, 64)
        assert extract_features(img, enc).shape == (16, 16, 16)

    def test_determinism(self):
        torch.manual_seed(0)
        enc = FeatureEncoder(channels=8, width=4)
        img = torch.rand(3, 32, 32)
        a = extract_features(img, enc)
        b = extract_features(img, enc)
        assert torch.equal(a, b)

    def test_flat_gray_image_zero_bias_gives_zero_features(self):
        # The encoder centers its input at mid-gray, so a flat 0.5 image with
        # zero biases propagates exact zeros through every layer.
        torch.manual_seed(0)
        enc = FeatureEncoder(channels=8, width=4)
        for m in enc.modules():
            if hasattr(m, "bias") and m.bias is not None:
                torch.nn.init.zeros_(m.bias)
        out = extract_features(torch.full((3, 32, 32), 0.5), enc)
        assert (out == 0).all()


class TestSimilarityVolume:
    def test_constant_unit_feature_closed_form(self):
        # Every raw score is 1; L2 renormalizing (2r+1)^2 ones gives 1/(2r+1).
        r = 2
        f = torch.zeros(4, 8, 8)
        f[0] = 1.0
        vol = similarity_volume(f, f, r)
        assert torch.allclose(vol.scores, torch.full_like(vol.scores, 1.0 / (2 * r + 1)))

    def test_orthogonal_features_zero_guard(self):
        fa = torch.zeros(2, 6, 6)
        fb = torch.zeros(2, 6, 6)
        fa[0] = 1.0
        fb[1] = 1.0
        vol = similarity_volume(fa, fb, 1)
        assert (vol.scores == 0).all()

    def test_matches_brute_force(self, rng):
        fa = random_unit_features(rng, 5, 8, 8)
        fb = random_unit_features(rng, 5, 8, 8)
        vol = similarity_volume(fa, fb, 2)
        oracle = brute_force_volume(fa, fb, 2)
        assert float((vol.scores - oracle).abs().max()) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            similarity_volume(torch.zeros(2, 4, 4), torch.zeros(2, 5, 5), 1)

    def test_window_too_large(self):
        with pytest.raises(WindowError):
            similarity_volume(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4), 3)

    def test_renormalization_prefers_unique_matches(self):
        # A cell with one strong candidate keeps a higher peak score than a
        # cell whose window has two equally strong candidates.
        P = 9
        raw_unique = torch.zeros(P, 1, 1)
        raw_unique[4] = 1.0
        raw_ambiguous = torch.zeros(P, 1, 1)
        raw_ambiguous[4] = 1.0
        raw_ambiguous[5] = 1.0
        from semalign.similarity import renormalize_scores

        assert float(renormalize_scores(raw_unique)[4]) > float(
            renormalize_scores(raw_ambiguous)[4]
        )

    def test_gradient_vs_finite_differences(self, rng):
        fa = torch.as_tensor(rng.normal(size=(3, 5, 5)))
        fb = torch.as_tensor(rng.normal(size=(3, 5, 5)))
        w = torch.as_tensor(rng.normal(size=(9, 5, 5)))  # random projection

        def loss():
            return (similarity_volume(fa, fb, 1).scores * w).sum()

        check_gradients(loss, [fa, fb])


class TestSelfSimilarity:
    def test_equals_cross_with_itself(self, rng):
        f = random_unit_features(rng, 4, 6, 6)
        a = self_similarity(f, 2)
        b = similarity_volume(f, f, 2)
        assert torch.equal(a.scores, b.scores)
        assert a.kind == "self" and b.kind == "cross"

    def test_center_raw_score_is_one_for_unit_features(self, rng):
        f = random_unit_features(rng, 4, 6, 6)
        from semalign.similarity import gather_windows

        raw = (f.unsqueeze(1) * gather_windows(f, 2)).sum(0)
        center = raw.shape[0] // 2
        assert torch.allclose(raw[center], torch.ones(6, 6, dtype=f.dtype), atol=1e-6)

    def test_uniform_texture_has_lower_window_variance(self, rng):
        flat = normalize_features(torch.ones(4, 8, 8))
        textured = random_unit_features(rng, 4, 8, 8)
        var_flat = self_similarity(flat, 2).scores.var()
        var_tex = self_similarity(textured, 2).scores.var()
        assert float(var_flat) < float(var_tex)


class TestBruteForceEquivalenceSweep:
    @pytest.mark.parametrize("h,w,r", [(6, 6, 1), (9, 7, 2), (12, 12, 3)])
    def test_grids_and_radii(self, h, w, r):
        rng = np.random.default_rng(hash((h, w, r)) % (2**32))
        fa = random_unit_features(rng, 4, h, w)
        fb = random_unit_features(rng, 4, h, w)
        vol = similarity_volume(fa, fb, r)
        oracle = brute_force_volume(fa, fb, r)
        assert float((vol.scores - oracle).abs().max()) < 1e-6
