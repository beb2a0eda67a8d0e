"""Tests for the frozen stub encoders and vocabulary files."""

import itertools

import numpy as np
import pytest
import torch

from openvocab_seg.evaluation.scenes import paint
from openvocab_seg.model.config import EncoderConfig
from openvocab_seg.model.encoders import (
    StubImageEncoder,
    load_vocabulary,
    save_vocabulary,
    stub_encode_image,
    stub_encode_text,
)
from openvocab_seg.shared.exceptions import ShapeError
from openvocab_seg.shared.models import VocabularySpec
from openvocab_seg.shared.numerics import cosine_sim


@pytest.fixture
def encoder_config():
    return EncoderConfig()


@pytest.fixture
def image():
    return np.random.default_rng(7).random((32, 32, 3))


class TestImageEncoder:
    """Tests for the stub image encoder."""

    @pytest.mark.parametrize("size", [16, 32, 64])
    def test_shape_contract(self, encoder_config, size):
        """Test V, F_mid, S_1 and S_2 extents for H0 = W0 = size."""
        pixels = np.random.default_rng(size).random((size, size, 3))
        encoded = stub_encode_image(pixels, seed=0, config=encoder_config)
        h = size // 4
        assert encoded.V.shape == (1, 64, h, h)
        assert encoded.F_mid.shape == (1, h, h, 64)
        assert encoded.S_1.shape == (1, 2 * h, 2 * h, 32)
        assert encoded.S_2.shape == (1, 4 * h, 4 * h, 32)
        assert encoded.V.dtype == torch.float64

    def test_deterministic(self, encoder_config, image):
        """Test identical inputs and seed give bit-identical features."""
        first = stub_encode_image(image, seed=5, config=encoder_config)
        second = stub_encode_image(image.copy(), seed=5, config=encoder_config)
        for name, tensor in first.tensors().items():
            assert torch.equal(tensor, second.tensors()[name])

    def test_seed_changes_weights(self, encoder_config, image):
        """Test different encoder seeds give different features."""
        first = stub_encode_image(image, seed=0, config=encoder_config)
        second = stub_encode_image(image, seed=1, config=encoder_config)
        assert not torch.equal(first.V, second.V)

    def test_indivisible_extent(self, encoder_config):
        """Test extents that are not a multiple of the patch size are rejected."""
        with pytest.raises(ShapeError, match="not divisible by patch size"):
            stub_encode_image(np.zeros((18, 16, 3)), seed=0, config=encoder_config)

    def test_batched_matches_single(self, encoder_config, image):
        """Test encoding a batch equals encoding each image alone."""
        other = np.random.default_rng(8).random((32, 32, 3))
        batch = stub_encode_image(np.stack([image, other]), seed=0, config=encoder_config)
        single = stub_encode_image(other, seed=0, config=encoder_config)
        assert torch.allclose(batch.V[1], single.V[0], atol=1e-12)

    def test_frozen_has_no_parameters(self, encoder_config):
        """Test the default encoder stores its weights as buffers."""
        assert list(StubImageEncoder(encoder_config).parameters()) == []

    def test_trainable_exposes_parameters(self):
        """Test encoder.trainable turns the weights into parameters."""
        encoder = StubImageEncoder(EncoderConfig(trainable=True))
        assert len(list(encoder.parameters())) == 4

    def test_category_texture_matches_text(self, encoder_config):
        """Test a region painted with a category pools close to that category's text vector."""
        vocab = ["background", "kettle", "stapler"]
        labels = np.full((32, 32), 1, dtype=np.int64)
        pixels = paint(labels, vocab, encoder_config)
        encoded = stub_encode_image(pixels, seed=0, config=encoder_config)
        bank = stub_encode_text(VocabularySpec(categories=vocab), seed=0, config=encoder_config)
        pooled = encoded.V[0].mean(dim=(1, 2))
        own = cosine_sim(pooled, bank.T_bar[1]).value
        assert own > 0.8
        assert own > cosine_sim(pooled, bank.T_bar[2]).value


class TestTextEncoder:
    """Tests for the stub text encoder."""

    def test_rows_are_unit_norm(self, encoder_config):
        """Test every prompt embedding has unit length."""
        vocab = VocabularySpec(categories=["a", "b", "c"], templates=["a {}", "the {}", "{} here"])
        bank = stub_encode_text(vocab, seed=0, config=encoder_config)
        assert bank.T.shape == (3, 3, 64)
        norms = torch.linalg.vector_norm(bank.T, dim=-1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-12)
        assert torch.allclose(bank.T_bar, bank.T.mean(dim=1), atol=1e-15)

    def test_single_prompt_mean_is_the_prompt(self, encoder_config):
        """Test with P = 1 the prompt mean equals the only prompt."""
        bank = stub_encode_text(VocabularySpec(categories=["mug"]), seed=0, config=encoder_config)
        assert torch.equal(bank.T_bar[0], bank.T[0, 0])

    def test_deterministic_and_order_independent(self, encoder_config):
        """Test a category's embedding does not depend on its position in the vocabulary."""
        first = stub_encode_text(VocabularySpec(categories=["mug", "lamp"]), 0, encoder_config)
        second = stub_encode_text(VocabularySpec(categories=["lamp", "mug"]), 0, encoder_config)
        assert torch.equal(first.T[0], second.T[1])

    def test_distinct_categories_are_weakly_correlated(self, encoder_config):
        """Test |cosine| between different categories stays below 0.6."""
        names = [f"object {i}" for i in range(15)]
        bank = stub_encode_text(VocabularySpec(categories=names), seed=0, config=encoder_config)
        worst = max(
            abs(cosine_sim(bank.T_bar[i], bank.T_bar[j]).value)
            for i, j in itertools.combinations(range(len(names)), 2)
        )
        assert worst < 0.6

    def test_duplicate_categories(self):
        """Test duplicate names are rejected."""
        with pytest.raises(ValueError, match="Duplicate category"):
            VocabularySpec(categories=["mug", "mug"])


class TestVocabularyFiles:
    """Tests for line-delimited vocabulary files."""

    def test_round_trip(self, tmp_path):
        """Test save then load returns the names in order."""
        path = tmp_path / "vocab.txt"
        save_vocabulary(path, ["background", "desk lamp", "mug"])
        assert load_vocabulary(path) == ["background", "desk lamp", "mug"]

    def test_comments_and_blanks_skipped(self, tmp_path):
        """Test comments and blank lines are ignored."""
        path = tmp_path / "vocab.txt"
        path.write_text("# desk objects\n\nbackground\n  mug  \n", encoding="utf-8")
        assert load_vocabulary(path) == ["background", "mug"]

    def test_duplicates_rejected(self, tmp_path):
        """Test a repeated name is an error."""
        path = tmp_path / "vocab.txt"
        path.write_text("mug\nmug\n", encoding="utf-8")
        with pytest.raises(ValueError, match="Duplicate"):
            load_vocabulary(path)

    def test_empty_file_rejected(self, tmp_path):
        """Test a file with no names is an error."""
        path = tmp_path / "vocab.txt"
        path.write_text("# nothing\n", encoding="utf-8")
        with pytest.raises(ValueError, match="lists no categories"):
            load_vocabulary(path)
