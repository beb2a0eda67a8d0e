"""Tests for the correlation volume, decode stages, class logits and the masked loss."""

import logging
import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from openvocab_seg.evaluation.gradcheck import check_decoder_loss
from openvocab_seg.model.config import DecoderConfig
from openvocab_seg.model.decoder import (
    DecodeStage,
    GuidedDecoder,
    bce_loss,
    build_correlation,
    decode_stage,
    final_resize,
    project_logits,
)
from openvocab_seg.shared.exceptions import ShapeError


DTYPE = torch.float64


def seeded(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def reference_conv3x3(x, weight, bias):
    """Zero-padded 3×3 convolution of a C×H×W map, one output pixel at a time."""
    c_in, h, w = x.shape
    out = torch.zeros(weight.shape[0], h, w, dtype=x.dtype)
    for o in range(weight.shape[0]):
        for i in range(h):
            for j in range(w):
                total = bias[o].clone()
                for ci in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            y, z = i + di - 1, j + dj - 1
                            if 0 <= y < h and 0 <= z < w:
                                total = total + weight[o, ci, di, dj] * x[ci, y, z]
                out[o, i, j] = total
    return out


class TestCorrelation:
    """Tests for the query-feature correlation volume."""

    def test_constant_query_projection(self):
        """Test a constant query projection makes every query slice identical."""
        query_proj = nn.Linear(4, 3).to(DTYPE)
        with torch.no_grad():
            query_proj.weight.zero_()
            query_proj.bias.fill_(1.0)
        feature_proj = nn.Linear(4, 3, bias=False).to(DTYPE)
        queries, x_fused = seeded(1, 5, 4), seeded(1, 2, 2, 4, seed=1)
        volume = build_correlation(queries, x_fused, query_proj, feature_proj)
        assert volume.shape == (1, 3, 5, 2, 2)
        assert torch.equal(volume, volume[:, :, :1].expand_as(volume))

    def test_zero_features_give_zero_volume(self):
        """Test X_fused = 0 gives an all-zero volume."""
        volume = build_correlation(
            seeded(2, 3, 4), torch.zeros(2, 2, 3, 4, dtype=DTYPE),
            nn.Linear(4, 2).to(DTYPE), nn.Linear(4, 2, bias=False).to(DTYPE),
        )
        assert not volume.any()

    def test_matches_reference_loop(self):
        """Test against the elementwise product per (channel, query, pixel)."""
        query_proj = nn.Linear(4, 3).to(DTYPE)
        feature_proj = nn.Linear(4, 3, bias=False).to(DTYPE)
        queries, x_fused = seeded(1, 2, 4), seeded(1, 2, 3, 4, seed=1)
        volume = build_correlation(queries, x_fused, query_proj, feature_proj)
        pq, px = query_proj(queries), feature_proj(x_fused)
        for c in range(3):
            for t in range(2):
                for h in range(2):
                    for w in range(3):
                        expected = (pq[0, t, c] * px[0, h, w, c]).item()
                        assert volume[0, c, t, h, w].item() == pytest.approx(expected, abs=1e-14)


class TestDecodeStage:
    """Tests for one upsample-conv-modulate stage."""

    def test_identity_modulation(self):
        """Test freshly reset FiLM reduces the stage to conv(nearest upsample)."""
        stage = DecodeStage(2, 3).to(DTYPE)
        volume = seeded(1, 2, 1, 2, 2)
        out = decode_stage(volume, seeded(1, 4, 4, 3, seed=1), stage)
        upsampled = volume[0, :, 0].repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
        expected = reference_conv3x3(upsampled, stage.conv.weight, stage.conv.bias)
        assert out.shape == (1, 2, 1, 4, 4)
        assert torch.allclose(out[0, :, 0], expected, atol=1e-12)

    def test_identity_modulation_keeps_negative_values(self):
        """Test negative inputs pass through an identity-modulated stage unclipped."""
        stage = DecodeStage(2, 3).to(DTYPE)
        volume = -seeded(1, 2, 2, 2, 2).abs() - 1.0
        out = decode_stage(volume, seeded(1, 4, 4, 3, seed=1), stage)
        planes = volume.transpose(1, 2).reshape(2, 2, 2, 2)
        expected = stage.conv(stage.upsample(planes)).reshape(1, 2, 2, 4, 4).transpose(1, 2)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_decoder_activates_between_stages(self):
        """Test the second stage sees GELU of the first stage's output."""
        decoder = GuidedDecoder(4, 3, DecoderConfig(channels=2)).to(DTYPE)
        queries, x_fused = seeded(1, 2, 4), seeded(1, 2, 2, 4, seed=1)
        guides = [seeded(1, 4, 4, 3, seed=2), seeded(1, 8, 8, 3, seed=3)]
        _, stages = decoder(queries, x_fused, guides, seeded(1, 3, 4, seed=4))
        expected = decode_stage(F.gelu(stages[0]), guides[1], decoder.stages[1])
        assert torch.equal(stages[1], expected)

    def test_modulation_from_guidance(self):
        """Test gamma and delta come from a 1×1 projection of the guide."""
        stage = DecodeStage(2, 3).to(DTYPE)
        gamma, delta = stage.modulation(seeded(1, 4, 4, 3))
        assert torch.equal(gamma, torch.ones_like(gamma))
        assert torch.equal(delta, torch.zeros_like(delta))

    def test_guide_at_wrong_resolution(self):
        """Test a guide not at twice the volume resolution is rejected."""
        stage = DecodeStage(2, 3).to(DTYPE)
        with pytest.raises(ShapeError, match="must be 2x"):
            stage(seeded(1, 2, 1, 2, 2), seeded(1, 3, 4, 3))


class TestProjectLogits:
    """Tests for cosine class logits."""

    def test_parallel_and_orthogonal(self):
        """Test a parallel class gets tau_out and an orthogonal one gets 0."""
        e = torch.tensor([1.0, 2.0, 0.0], dtype=DTYPE)
        volume = e.reshape(1, 3, 1, 1, 1).expand(1, 3, 2, 2, 2)
        g_hat = torch.stack([2.0 * e, torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)]).unsqueeze(0)
        tau = torch.tensor(7.0, dtype=DTYPE)
        logits = project_logits(volume, g_hat, nn.Identity(), tau)
        assert logits.shape == (1, 2, 2, 2)
        assert torch.allclose(logits[:, 0], torch.full((1, 2, 2), 7.0, dtype=DTYPE), atol=1e-12)
        assert torch.equal(logits[:, 1], torch.zeros(1, 2, 2, dtype=DTYPE))

    def test_extra_classes_do_not_move_existing_logits(self):
        """Test adding classes leaves the other classes' logits unchanged."""
        embed = nn.Linear(3, 4).to(DTYPE)
        volume = seeded(1, 3, 2, 4, 4)
        g_hat = seeded(1, 2, 4, seed=1)
        extended = torch.cat([g_hat, seeded(1, 2, 4, seed=2)], dim=1)
        tau = torch.tensor(10.0, dtype=DTYPE)
        base = project_logits(volume, g_hat, embed, tau)
        more = project_logits(volume, extended, embed, tau)
        torch.testing.assert_close(more[:, :2], base, rtol=0, atol=1e-12)


class TestFinalResize:
    """Tests for the crop-and-resize to the input extent."""

    def test_identity_is_bit_exact(self):
        """Test logits already at 64×64 are returned unchanged."""
        logits = seeded(1, 3, 64, 64)
        assert torch.equal(final_resize(logits, 64, 64), logits)

    def test_crop_before_resize(self):
        """Test the padded border is cropped away first."""
        logits = torch.zeros(1, 1, 6, 6, dtype=DTYPE)
        logits[..., 4:, :] = 100.0
        out = final_resize(logits, 4, 4, valid=(4, 4))
        assert not out.any()


class TestBCELoss:
    """Tests for the masked multi-label loss."""

    def test_zero_logits_single_class(self):
        """Test zero logits cost ln 2 per class per valid pixel."""
        loss = bce_loss(torch.zeros(1, 1, 1, 1, dtype=DTYPE), torch.ones(1, 1, 1, 1, dtype=DTYPE),
                        torch.ones(1, 1, 1, dtype=DTYPE))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_two_class_example(self):
        """Test logits (2, -2) against one-hot (1, 0) cost 0.253856."""
        logits = torch.tensor([2.0, -2.0], dtype=DTYPE).reshape(1, 2, 1, 1)
        Y = torch.tensor([1.0, 0.0], dtype=DTYPE).reshape(1, 2, 1, 1)
        loss = bce_loss(logits, Y, torch.ones(1, 1, 1, dtype=DTYPE))
        assert loss.item() == pytest.approx(0.253856, abs=1e-5)

    def test_masked_pixels_are_inert(self):
        """Test perturbing logits outside the mask leaves the loss bit-identical."""
        logits = seeded(1, 3, 4, 4)
        Y = (seeded(1, 3, 4, 4, seed=1) > 0).to(DTYPE)
        M = torch.ones(1, 4, 4, dtype=DTYPE)
        M[0, :2] = 0.0
        perturbed = logits.clone()
        perturbed[..., :2, :] += 1000.0
        assert torch.equal(bce_loss(logits, Y, M), bce_loss(perturbed, Y, M))

    def test_empty_mask(self, caplog):
        """Test an empty mask returns 0 and warns."""
        with caplog.at_level(logging.WARNING):
            loss = bce_loss(seeded(1, 2, 2, 2), torch.zeros(1, 2, 2, 2, dtype=DTYPE),
                            torch.zeros(1, 2, 2, dtype=DTYPE))
        assert loss.item() == 0.0
        assert "mask selects no pixels" in caplog.text

    def test_gradient_matches_closed_form(self):
        """Test dL/dlogits = M (sigmoid(z) - Y) / sum(M)."""
        logits = seeded(2, 3, 2, 2).requires_grad_(True)
        Y = (seeded(2, 3, 2, 2, seed=1) > 0).to(DTYPE)
        M = (seeded(2, 2, 2, seed=2) > -0.5).to(DTYPE)
        bce_loss(logits, Y, M).backward()
        expected = M.unsqueeze(1) * (torch.sigmoid(logits.detach()) - Y) / M.sum()
        assert torch.allclose(logits.grad, expected, atol=1e-14)

    def test_shape_mismatch(self):
        """Test disagreeing shapes are rejected."""
        with pytest.raises(ShapeError, match="bce_loss shapes disagree"):
            bce_loss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 3), torch.ones(1, 4, 4))


class TestGuidedDecoder:
    """Tests for the assembled decoder."""

    def test_output_resolution(self):
        """Test logits come out at four times the feature grid."""
        torch.manual_seed(0)
        decoder = GuidedDecoder(8, 4, DecoderConfig(channels=4)).to(DTYPE)
        guides = [seeded(1, 4, 6, 4), seeded(1, 8, 12, 4, seed=1)]
        logits, stages = decoder(seeded(1, 2, 8), seeded(1, 2, 3, 8), guides, seeded(5, 8))
        assert logits.shape == (1, 5, 8, 12)
        assert [s.shape for s in stages] == [(1, 4, 2, 4, 6), (1, 4, 2, 8, 12)]

    def test_gradients_match_finite_differences(self):
        """Test the decoder and loss pass the finite-difference check at float64."""
        assert check_decoder_loss(seed=0).passed(1e-4)
