"""Tests for the assembled segmentation model."""

from unittest.mock import patch

import numpy as np
import pytest
import torch

from openvocab_seg.evaluation.gradcheck import check_model
from openvocab_seg.model.assembly import (
    ALIGNMENT_OPERATIONS,
    PRIOR_OPERATIONS,
    build_model,
)
from openvocab_seg.shared.exceptions import ConfigurationError, NumericalError
from openvocab_seg.shared.models import VocabularySpec


CATEGORIES = ["background", "kettle", "lantern", "stapler"]
ALL_OFF = {
    "ablation.use_object_prior": False,
    "ablation.use_ccf": False,
    "ablation.use_region_alignment": False,
}


@pytest.fixture
def model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture
def images():
    return torch.from_numpy(np.random.default_rng(0).random((2, 16, 16, 3)))


@pytest.fixture
def vocabulary():
    return VocabularySpec(categories=list(CATEGORIES))


class TestForward:
    """Tests for shapes, tracing and determinism."""

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_logit_shape(self, model, images, n):
        """Test logits are B×N×H0×W0 for any vocabulary size."""
        logits = model(images, VocabularySpec(categories=CATEGORIES[:n]))
        assert logits.shape == (2, n, 16, 16)
        assert logits.dtype == torch.float64

    def test_trace_does_not_change_logits(self, model, images, vocabulary):
        """Test tracing returns bit-identical logits."""
        plain = model(images, vocabulary)
        traced, record = model(images, vocabulary, trace=True)
        assert torch.equal(plain, traced)
        assert record.categories == CATEGORIES
        assert record.A.shape == (2, 4, 4)
        assert record.G.shape == (2, 4, 4, 8)
        assert len(record.decoder_stages) == 2

    def test_same_seed_same_model(self, tiny_config, images, vocabulary):
        """Test two builds from one config give bit-identical logits."""
        first = build_model(tiny_config)(images, vocabulary)
        second = build_model(tiny_config)(images, vocabulary)
        assert torch.equal(first, second)

    def test_seed_changes_initialisation(self, tiny_config, images, vocabulary):
        """Test a different seed gives a different model."""
        first = build_model(tiny_config)(images, vocabulary)
        second = build_model(tiny_config.with_overrides({"seed": 1}))(images, vocabulary)
        assert not torch.equal(first, second)

    def test_vocabulary_order_equivariance(self, model, images, vocabulary):
        """Test permuting the vocabulary permutes the logit channels exactly."""
        order = [2, 0, 3, 1]
        permuted = VocabularySpec(categories=[CATEGORIES[i] for i in order])
        assert torch.equal(model(images, permuted), model(images, vocabulary)[:, order])

    def test_precomputed_inputs(self, model, images, vocabulary):
        """Test encoded images and a text bank give the same logits as raw inputs."""
        encoded = model.encode_images(images)
        bank = model.text_bank(vocabulary)
        assert torch.equal(model(encoded, bank), model(images, vocabulary))

    def test_predict_returns_labels(self, model, images, vocabulary):
        """Test predict gives B×H0×W0 category indices."""
        labels = model.predict(images, vocabulary)
        assert labels.shape == (2, 16, 16)
        assert int(labels.max()) < len(CATEGORIES)


class TestAblationSwitches:
    """Tests for the core-module switches."""

    def test_operation_counts_with_everything_on(self, model, images, vocabulary):
        """Test one forward runs every alignment and fusion operation once per block."""
        model(images, vocabulary)
        for name in PRIOR_OPERATIONS + ALIGNMENT_OPERATIONS:
            assert model.op_counts[name] == 1
        assert model.op_counts["language_query_attention"] == 1

    def test_everything_off(self, tiny_config, images, vocabulary):
        """Test the all-off model runs none of the switched operations and differs from all-on."""
        off = build_model(tiny_config.with_overrides(ALL_OFF))
        logits = off(images, vocabulary)
        assert sum(off.op_counts.values()) == 0
        assert off.alignment is None and off.fusion is None
        assert not torch.allclose(logits, build_model(tiny_config)(images, vocabulary))

    def test_prior_without_region_alignment(self, tiny_config, images, vocabulary):
        """Test the prior still runs when region alignment is off."""
        config = tiny_config.with_overrides({"ablation.use_region_alignment": False})
        model = build_model(config)
        _, record = model(images, vocabulary, trace=True)
        assert model.op_counts["object_prior"] == 1
        assert model.op_counts["region_partition"] == 0
        assert record.A is None
        assert record.p_prior.shape == (2, 4)


class TestConstruction:
    """Tests for validation, parameter groups and error attribution."""

    def test_invalid_config_rejected(self, tiny_config):
        """Test build_model validates cross-module constraints."""
        with pytest.raises(ConfigurationError, match="region_partition"):
            build_model(tiny_config.with_overrides({"align.region_grid": 5}))

    def test_frozen_encoder_has_one_group(self, model):
        """Test only the model group exists while the encoder is frozen."""
        assert list(model.parameter_groups()) == ["model"]

    def test_trainable_encoder_group(self, tiny_config):
        """Test a trainable encoder gets its own parameter group."""
        model = build_model(tiny_config.with_overrides({"encoder.trainable": True}))
        groups = model.parameter_groups()
        assert len(groups["encoder"]) == 4

    def test_stage_named_in_errors(self, model, images, vocabulary):
        """Test a numerical failure names the stage it came from."""
        failure = NumericalError("G: 1 non-finite value(s)")
        with patch.object(model.alignment, "forward", side_effect=failure):
            with pytest.raises(NumericalError, match=r"^\[prior_align\]"):
                model(images, vocabulary)

    def test_dump_location_reported_once(self, model, images, vocabulary):
        """Test re-raising with the stage name keeps a single dump suffix."""
        failure = NumericalError("G: 1 non-finite value(s)", dump_path="/tmp/batch.lgse")
        with patch.object(model.alignment, "forward", side_effect=failure):
            with pytest.raises(NumericalError) as info:
                model(images, vocabulary)
        assert str(info.value).count("diagnostic dump") == 1
        assert str(info.value) == (
            "[prior_align] G: 1 non-finite value(s) (diagnostic dump: /tmp/batch.lgse)"
        )
        assert info.value.dump_path == "/tmp/batch.lgse"

    def test_value_error_names_stage(self, model, images, vocabulary):
        """Test a plain ValueError from a stage carries the stage name."""
        failure = ValueError("temperature must be positive, got 0.0")
        with patch.object(model.fusion, "forward", side_effect=failure):
            with pytest.raises(ValueError, match=r"^\[fusion\] temperature must be positive"):
                model(images, vocabulary)


class TestPriorOnlyPath:
    """Tests for the object prior without region alignment."""

    def test_adaptive_weight_is_learnable(self, tiny_config, images, vocabulary):
        """Test an adaptive lambda gets its own parameter and receives gradient."""
        model = build_model(tiny_config.with_overrides({
            "ablation.use_region_alignment": False,
            "align.adaptive_prior": True,
        }))
        assert model.prior_logit is not None
        assert float(model.prior_weight) == 0.5
        model(images, vocabulary).sum().backward()
        assert model.prior_logit.grad is not None
        assert any(p is model.prior_logit for p in model.parameter_groups()["model"])

    def test_fixed_weight_without_adaptive_prior(self, tiny_config):
        """Test the configured lambda is used when the prior is not adaptive."""
        model = build_model(tiny_config.with_overrides({
            "ablation.use_region_alignment": False,
            "align.adaptive_prior": False,
            "align.prior_lambda": 0.25,
        }))
        assert model.prior_logit is None
        assert model.prior_weight == 0.25


@pytest.mark.slow
def test_model_gradients_match_finite_differences():
    """Test the assembled model passes the sampled finite-difference check."""
    assert check_model(seed=0).passed(1e-4)
