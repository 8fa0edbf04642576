"""Masking, SSIM auxiliary loss, and the primary cross-entropy loss."""

import numpy as np
import pytest

from docttt import ops
from docttt.gradcheck import check_grad
from docttt.objectives import (
    MaskSpec,
    SsimConfig,
    mask_image,
    primary_loss,
    primary_loss_from_logits,
    ssim_loss,
)
from docttt.tensor import ParamSet, ShapeMismatchError, Tensor
from docttt.tokens import TokenSequence


class TestMaskImage:
    def test_ratio_zero_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16)).astype(np.float32)
        masked, grid = mask_image(img, MaskSpec(mask_ratio=0.0), rng)
        assert np.array_equal(masked.data, img)
        assert grid.sum() == 0

    def test_exact_masked_count(self):
        rng = np.random.default_rng(1)
        img = rng.random((32, 32)).astype(np.float32)
        masked, grid = mask_image(img, MaskSpec(patch_size=4, mask_ratio=0.75), rng)
        assert grid.shape == (8, 8)
        assert grid.sum() == 48  # floor(0.75 * 64)

    def test_ratio_one_fills_everything(self):
        rng = np.random.default_rng(2)
        img = rng.random((8, 8)).astype(np.float32)
        masked, grid = mask_image(img, MaskSpec(patch_size=4, mask_ratio=1.0), rng)
        assert np.all(masked.data == 0.0)
        assert grid.all()

    def test_unmasked_pixels_bitwise_identical(self):
        rng = np.random.default_rng(3)
        img = rng.random((24, 24)).astype(np.float32)
        masked, grid = mask_image(img, MaskSpec(patch_size=4, mask_ratio=0.5), rng)
        pixel_mask = np.repeat(np.repeat(grid, 4, axis=0), 4, axis=1)
        assert np.array_equal(masked.data[~pixel_mask], img[~pixel_mask])
        assert np.all(masked.data[pixel_mask] == 0.0)

    def test_indivisible_dims_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ShapeMismatchError):
            mask_image(np.zeros((10, 16), dtype=np.float32), MaskSpec(patch_size=4), rng)

    def test_uniform_selection_without_replacement(self):
        rng = np.random.default_rng(5)
        img = np.zeros((8, 8), dtype=np.float32)
        counts = np.zeros((2, 2))
        for _ in range(400):
            _, grid = mask_image(img, MaskSpec(patch_size=4, mask_ratio=0.5), rng)
            assert grid.sum() == 2  # exactly, never with replacement
            counts += grid
        assert counts.min() > 120  # roughly uniform across the 4 patches


class TestSsimLoss:
    def test_self_similarity_is_zero(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(0, 1, (12, 18)))
        assert abs(float(ssim_loss(x, x).data)) < 1e-6

    def test_constant_images_closed_form(self):
        x = Tensor(np.zeros((16, 16)))
        y = Tensor(np.ones((16, 16)))
        a = 1e-4
        expect = 1.0 - a / (1.0 + a)
        assert float(ssim_loss(x, y).data) == pytest.approx(expect, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(0, 1, (10, 10)))
        y = Tensor(rng.uniform(0, 1, (10, 10)))
        assert float(ssim_loss(x, y).data) == pytest.approx(
            float(ssim_loss(y, x).data), abs=1e-6
        )

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = Tensor(rng.uniform(0, 1, (9, 9)))
            y = Tensor(rng.uniform(0, 1, (9, 9)))
            v = float(ssim_loss(x, y).data)
            assert 0.0 <= v <= 2.0

    def test_constant_shift_strictly_between_zero_and_one(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.1, 0.4, (10, 10))
        for c in (0.05, 0.2, 0.5):
            ssim_val = 1.0 - float(ssim_loss(Tensor(x), Tensor(x + c)).data)
            assert 0.0 < ssim_val < 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        point = ParamSet(
            {
                "x": Tensor(rng.uniform(0.1, 0.9, (8, 8)), requires_grad=True),
                "y": Tensor(rng.uniform(0.1, 0.9, (8, 8)), requires_grad=True),
            }
        )
        assert check_grad(lambda p: ssim_loss(p["x"], p["y"]), point) < 1e-5

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            ssim_loss(Tensor(np.zeros((8, 8))), Tensor(np.zeros((8, 9))))

    def test_valid_mask_excludes_padding(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (16, 16))
        y = rng.uniform(0, 1, (16, 16))
        # corrupt the padding region only; masked loss must not change
        valid = np.zeros((16, 16), dtype=bool)
        valid[:12, :12] = True
        base = float(ssim_loss(Tensor(x), Tensor(y), valid_mask=valid).data)
        x2, y2 = x.copy(), y.copy()
        x2[12:] = 0.123
        y2[12:] = 0.9
        after = float(ssim_loss(Tensor(x2), Tensor(y2), valid_mask=valid).data)
        assert base == pytest.approx(after, abs=1e-7)

    def test_global_mode_constant_case(self):
        cfg = SsimConfig(windowed=False)
        x = Tensor(np.zeros((8, 8)))
        y = Tensor(np.ones((8, 8)))
        a = 1e-4
        assert float(ssim_loss(x, y, cfg).data) == pytest.approx(1 - a / (1 + a), abs=1e-9)

    def test_nonpositive_stabilizers_rejected(self):
        with pytest.raises(ValueError):
            SsimConfig(a=0.0)


class TestPrimaryLoss:
    def test_confident_predictions(self):
        target = TokenSequence([0, 2, 3, 1])  # sos a b eot
        vocab = 35
        dists = np.full((3, vocab), 1e-9 / (vocab - 1))
        for t, tok in enumerate([2, 3, 1]):
            dists[t, tok] = 1.0 - 1e-9
        loss = primary_loss(Tensor(dists), target)
        assert float(loss.data) < 1e-6

    def test_uniform_closed_form(self):
        vocab = 32
        target = TokenSequence([0, 2, 3, 4, 1])  # L_y = 3
        dists = np.full((4, vocab), 1.0 / vocab)
        loss = primary_loss(Tensor(dists), target)
        assert float(loss.data) == pytest.approx(4 * np.log(32), rel=1e-6)

    def test_against_stepwise_oracle(self):
        rng = np.random.default_rng(0)
        vocab = 11
        content = [2, 5, 7, 3]
        target = TokenSequence([0] + content + [1])
        raw = rng.uniform(0.1, 1.0, (5, vocab))
        dists = raw / raw.sum(axis=1, keepdims=True)
        expected_tokens = content + [1]
        oracle = -sum(np.log(dists[t, tok]) for t, tok in enumerate(expected_tokens))
        loss = primary_loss(Tensor(dists), target)
        assert float(loss.data) == pytest.approx(oracle, rel=1e-6)

    def test_length_mismatch_rejected(self):
        target = TokenSequence([0, 2, 3, 1])
        with pytest.raises(ShapeMismatchError):
            primary_loss(Tensor(np.full((2, 35), 1 / 35)), target)

    def test_permutation_sensitivity(self):
        rng = np.random.default_rng(1)
        vocab = 9
        raw = rng.uniform(0.1, 1.0, (4, vocab))
        dists = Tensor(raw / raw.sum(axis=1, keepdims=True))
        a = float(primary_loss(dists, TokenSequence([0, 2, 3, 4, 1])).data)
        b = float(primary_loss(dists, TokenSequence([0, 4, 3, 2, 1])).data)
        assert a != pytest.approx(b)

    def test_logits_variant_matches_dists_variant(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(4, 12))
        target = TokenSequence([0, 2, 3, 4, 1])
        via_logits = float(primary_loss_from_logits(Tensor(logits), target).data)
        dists = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        via_dists = float(primary_loss(Tensor(dists), target).data)
        assert via_logits == pytest.approx(via_dists, rel=1e-6)

    def test_sum_not_mean(self):
        # doubling the sequence roughly doubles the loss (summation contract)
        vocab = 8
        uni = np.full((2, vocab), 1.0 / vocab)
        l1 = float(primary_loss(Tensor(uni), TokenSequence([0, 2, 1])).data)
        uni4 = np.full((4, vocab), 1.0 / vocab)
        l2 = float(primary_loss(Tensor(uni4), TokenSequence([0, 2, 3, 4, 1])).data)
        assert l2 == pytest.approx(2 * l1, rel=1e-6)
