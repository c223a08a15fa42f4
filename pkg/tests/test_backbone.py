"""
Unit tests for the shifted-window transformer.

Tests window partitioning, the shifted-window mask, shifted attention
against a dense masked reference, block gradients and the classifier.
"""

import numpy as np
import pytest
import torch

from extraction.config import BackboneConfig, TrainSchedule
from extraction.core.context import StageContext
from extraction.core.vocab import ChartType, TextRole
from extraction.errors import DataError, ModelError
from extraction.models.backbone import (ChartTypeClassifier, PatchEmbedding, PatchMerging, SwinBlock,
                                        SwinClassifier, WindowAttention, block_pair, classify_chart_type,
                                        classify_text_role, patch_merge, patch_partition, predict_proba,
                                        shifted_window_mask, sw_msa, train_classifier, w_msa,
                                        window_partition, window_reverse)


def _region(a, size, window, shift):
    if a < size - window:
        return 0
    return 1 if a < size - shift else 2


def dense_shifted_attention(x, attention, shift):
    """Reference: attention over the whole grid, restricted to tokens sharing a shifted window and region."""
    batch, height, width, channels = x.shape
    window, heads = attention.window_size, attention.num_heads
    tokens = x.reshape(batch, height * width, channels)
    qkv = attention.qkv(tokens).reshape(batch, height * width, 3, heads, channels // heads)
    q, k, v = qkv.permute(2, 0, 3, 1, 4)
    scores = (q * attention.scale) @ k.transpose(-2, -1)

    places = []
    for i in range(height):
        for j in range(width):
            ri, rj = (i - shift) % height, (j - shift) % width
            places.append((ri // window, rj // window, ri % window, rj % window,
                           _region(ri, height, window, shift), _region(rj, width, window, shift)))
    n = len(places)
    allowed = torch.zeros(n, n, dtype=torch.bool)
    bias = torch.zeros(heads, n, n, dtype=x.dtype)
    table = attention.relative_position_bias_table
    for p, (wy, wx, ly, lx, gy, gx) in enumerate(places):
        for r, (wy2, wx2, ly2, lx2, gy2, gx2) in enumerate(places):
            if (wy, wx, gy, gx) == (wy2, wx2, gy2, gx2):
                allowed[p, r] = True
                if table is not None:
                    index = (ly - ly2 + window - 1) * (2 * window - 1) + (lx - lx2 + window - 1)
                    bias[:, p, r] = table[index]
    scores = (scores + bias).masked_fill(~allowed, float('-inf')).softmax(dim=-1)
    out = (scores @ v).transpose(1, 2).reshape(batch, n, channels)
    return attention.proj(out).reshape(batch, height, width, channels)


class TestWindows:
    """Test window partitioning and the shifted-window mask."""

    def test_partition_reverse(self):
        x = torch.randn(2, 8, 8, 3)
        windows = window_partition(x, 4)
        assert windows.shape == (8, 16, 3)
        assert torch.equal(window_reverse(windows, 4, 8, 8), x)

    def test_partition_first_window(self):
        x = torch.arange(64.0).view(1, 8, 8, 1)
        first = window_partition(x, 4)[0, :, 0]
        assert first.tolist() == [0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27]

    def test_partition_rejects_indivisible(self):
        with pytest.raises(ValueError):
            window_partition(torch.zeros(1, 6, 6, 1), 4)

    def test_mask(self):
        mask = shifted_window_mask(8, 8, 4, 2)
        assert mask.shape == (4, 16, 16)
        assert mask.dtype == torch.bool
        # the top-left window holds a single region
        assert not mask[0].any()
        assert mask[3].any()
        assert torch.equal(mask, mask.transpose(1, 2))
        assert not mask.diagonal(dim1=1, dim2=2).any()


class TestShiftedAttention:
    """Test W-MSA and SW-MSA."""

    def setup_method(self):
        """Set up test fixtures."""
        torch.manual_seed(0)
        self.attention = WindowAttention(8, 2, 4).double()
        with torch.no_grad():
            self.attention.relative_position_bias_table.normal_()
        self.x = torch.randn(2, 8, 8, 8, dtype=torch.float64)

    def test_matches_dense_reference(self):
        """Test shifted attention against dense masked attention on an 8x8 grid."""
        with torch.no_grad():
            fast = sw_msa(self.x, self.attention, shift=2)
            slow = dense_shifted_attention(self.x, self.attention, 2)
        assert torch.allclose(fast, slow, atol=1e-6)

    def test_unshifted_matches_dense_reference(self):
        with torch.no_grad():
            fast = sw_msa(self.x, self.attention, shift=0)
            slow = dense_shifted_attention(self.x, self.attention, 0)
        assert torch.allclose(fast, slow, atol=1e-6)

    def test_shift_zero_is_window_attention(self):
        with torch.no_grad():
            shifted = sw_msa(self.x, self.attention, shift=0)
            plain = window_reverse(w_msa(window_partition(self.x, 4), self.attention), 4, 8, 8)
        assert torch.equal(shifted, plain)

    def test_window_attention_follows_whole_window_rolls(self):
        """Test rolling the grid by multiples of the window rolls the output the same way."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            rows, cols = (int(v) for v in rng.integers(1, 4, size=2))
            height, width = 4 * rows, 4 * cols
            dy, dx = 4 * int(rng.integers(0, rows + 1)), 4 * int(rng.integers(0, cols + 1))
            x = torch.randn(1, height, width, 8, dtype=torch.float64)
            with torch.no_grad():
                out = window_reverse(w_msa(window_partition(x, 4), self.attention), 4, height, width)
                moved = torch.roll(x, shifts=(dy, dx), dims=(1, 2))
                out_moved = window_reverse(w_msa(window_partition(moved, 4), self.attention), 4, height, width)
            assert torch.allclose(out_moved, torch.roll(out, shifts=(dy, dx), dims=(1, 2)), atol=1e-10)

    def test_default_shift_is_half_window(self):
        with torch.no_grad():
            assert torch.equal(sw_msa(self.x, self.attention), sw_msa(self.x, self.attention, shift=2))

    def test_attention_rows(self):
        """Test softmax rows sum to one and masked pairs get zero weight."""
        with torch.no_grad():
            _, weights = sw_msa(self.x, self.attention, shift=2, return_attention=True)
        assert weights.shape == (8, 2, 16, 16)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(8, 2, 16, dtype=torch.float64))
        mask = shifted_window_mask(8, 8, 4, 2)
        blocked = weights.view(2, 4, 2, 16, 16).permute(0, 2, 1, 3, 4)[:, :, mask]
        assert torch.all(blocked == 0)

    def test_rejects_wrong_window(self):
        with pytest.raises(ValueError):
            self.attention(torch.zeros(1, 9, 8, dtype=torch.float64))


class TestBlocks:
    """Test Swin blocks and patch merging."""

    def test_block_pair_gradients(self):
        torch.manual_seed(1)
        regular = SwinBlock(4, 1, 2, shift_size=0).double()
        shifted = SwinBlock(4, 1, 2, shift_size=1).double()
        f = torch.randn(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: block_pair(t, regular, shifted), (f,), eps=1e-6, atol=1e-4)

    def test_block_pair_order(self):
        with pytest.raises(ValueError):
            block_pair(torch.zeros(1, 4, 4, 4), SwinBlock(4, 1, 2, 1), SwinBlock(4, 1, 2, 0))

    def test_block_keeps_shape(self):
        out = SwinBlock(8, 2, 4, shift_size=2)(torch.randn(3, 8, 8, 8))
        assert out.shape == (3, 8, 8, 8)

    def test_patch_merge(self):
        out = patch_merge(torch.randn(2, 8, 8, 4), PatchMerging(4))
        assert out.shape == (2, 4, 4, 8)

    def test_patch_merge_odd(self):
        with pytest.raises(ValueError, match='odd'):
            patch_merge(torch.randn(1, 3, 3, 4), PatchMerging(4))


class TestClassifier:
    """Test the classifier network and its helpers."""

    def test_shapes(self, tiny_backbone):
        model = SwinClassifier(tiny_backbone)
        x = torch.randn(2, 3, 32, 32)
        assert model(x).shape == (2, 4)
        maps = model.forward_features(x)
        assert [m.side for m in maps] == [8, 4, 2, 1]
        assert [m.grid.shape[-1] for m in maps] == [8, 16, 32, 64]

    def test_patch_partition(self):
        embedding = PatchEmbedding(4, 6)
        tokens = patch_partition(torch.randn(2, 3, 16, 24), embedding)
        assert tokens.shape == (2, 4, 6, 6)
        with pytest.raises(ValueError, match='not divisible by patch size 4'):
            patch_partition(torch.randn(1, 3, 18, 16), embedding)

    def test_predict_proba(self, tiny_backbone):
        model = SwinClassifier(tiny_backbone)
        images = [np.random.default_rng(i).random((20 + i, 40, 3)).astype(np.float32) for i in range(3)]
        probs = predict_proba(model, images)
        assert probs.shape == (3, 4)
        assert torch.allclose(probs.sum(dim=-1), torch.ones(3))
        assert predict_proba(model, []).shape == (0, 4)

    def test_head_size_checked(self, tiny_backbone):
        model = SwinClassifier(tiny_backbone)
        pixels = np.ones((32, 32, 3), dtype=np.float32)
        with pytest.raises(ModelError):
            classify_chart_type(pixels, model)
        with pytest.raises(ModelError):
            classify_text_role(pixels, model)

    def test_adapter(self, tiny_backbone):
        model = SwinClassifier(tiny_backbone.with_num_classes(len(ChartType)))
        label, confidence = ChartTypeClassifier(model).classify(np.ones((30, 50, 3)), StageContext())
        assert isinstance(label, ChartType)
        assert 0.0 <= confidence <= 1.0

    def test_role_head(self, tiny_backbone):
        model = SwinClassifier(tiny_backbone.with_num_classes(len(TextRole)))
        role, _ = classify_text_role(np.ones((8, 30, 3), dtype=np.float32), model)
        assert isinstance(role, TextRole)

    def test_training_rejects_single_class(self, tiny_backbone):
        images = [np.ones((32, 32, 3), dtype=np.float32)] * 2
        with pytest.raises(DataError):
            train_classifier(images, [1, 1], tiny_backbone, TrainSchedule(steps=1))

    def test_training_records_curve(self, tiny_backbone):
        rng = np.random.default_rng(0)
        images = [rng.random((32, 32, 3)).astype(np.float32) for _ in range(4)]
        model, curve = train_classifier(images, [0, 1, 2, 3], tiny_backbone,
                                        TrainSchedule(steps=4, batch_size=2), validation=(images, [0, 1, 2, 3]))
        assert len(curve.losses) == 4
        assert len(curve.train_accuracy) == 2
        assert len(curve.val_accuracy) == 2
        assert not model.training

    def test_training_is_deterministic(self, tiny_backbone):
        rng = np.random.default_rng(0)
        images = [rng.random((32, 32, 3)).astype(np.float32) for _ in range(4)]
        schedule = TrainSchedule(steps=3, batch_size=2, seed=5)
        first, _ = train_classifier(images, [0, 1, 0, 1], tiny_backbone, schedule)
        second, _ = train_classifier(images, [0, 1, 0, 1], tiny_backbone, schedule)
        for a, b in zip(first.state_dict().values(), second.state_dict().values()):
            assert torch.equal(a, b)

    @pytest.mark.slow
    def test_overfits_small_set(self):
        """Test the classifier reaches full training accuracy on eight solid-color images."""
        config = BackboneConfig(input_size=(32, 32), embed_dim=16, depths=(2, 2, 2, 2),
                                heads=(2, 2, 2, 2), num_classes=2)
        images, labels = [], []
        for i in range(8):
            color = np.zeros((32, 32, 3), dtype=np.float32)
            color[..., i % 2] = 0.2 + 0.1 * (i // 2)
            images.append(color)
            labels.append(i % 2)
        _, curve = train_classifier(images, labels, config,
                                    TrainSchedule(steps=200, batch_size=8, learning_rate=1e-3))
        assert curve.train_accuracy[-1] == 1.0
