"""Shared fixtures: a tiny float64 configuration that builds and trains in well under a second."""

import pytest

from openvocab_seg.model.config import ModelConfig, dump_config


TINY_OVERRIDES = {
    "precision": "f64",
    "data.image_size": 16,
    "data.num_categories": 4,
    "data.min_present": 2,
    "data.max_present": 3,
    "data.train_scenes": 4,
    "data.val_scenes": 2,
    "encoder.channels": 16,
    "encoder.guidance_channels": 4,
    "align.region_grid": 2,
    "align.guidance_dim": 8,
    "align.mlp_hidden": 8,
    "fusion.depth": 1,
    "fusion.heads": 2,
    "fusion.num_queries": 2,
    "fusion.state_dim": 2,
    "decoder.channels": 4,
    "training.iterations": 3,
    "training.warmup_steps": 1,
    "training.batch_size": 2,
    "training.log_interval": 1,
    "training.checkpoint_interval": 0,
    "eval.window": 16,
}


@pytest.fixture
def tiny_config():
    """Small f64 configuration: 16×16 images, 4×4 feature grid, 2×2 regions."""
    return ModelConfig().with_overrides(TINY_OVERRIDES)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    """The tiny configuration written as a flat config file."""
    path = tmp_path / "tiny.cfg"
    path.write_text(dump_config(tiny_config), encoding="utf-8")
    return path
