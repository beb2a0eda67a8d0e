"""Tests for evaluation runs, ablation ladders and unseen-vocabulary transfer."""

import json

import numpy as np
import pytest

from openvocab_seg.evaluation.benchmark import (
    LADDERS,
    evaluate,
    run_ablation_ladder,
    summarize_ladder,
    train_and_evaluate,
    transfer_eval,
    unseen_vocabulary,
)
from openvocab_seg.evaluation.scenes import BACKGROUND, generate_benchmark
from openvocab_seg.model.assembly import build_model
from openvocab_seg.model.config import ModelConfig


def test_evaluate_writes_records(tiny_config, tmp_path):
    """Test evaluate scores every scene and writes one JSONL record each."""
    vocabulary, scenes = generate_benchmark(tiny_config, "val")
    path = tmp_path / "metrics.jsonl"
    report = evaluate(build_model(tiny_config), scenes, vocabulary, out_path=path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(scenes) == len(report.records)
    record = json.loads(lines[0])
    assert set(record) == {"image", "miou", "per_class_iou", "false_positive_rate"}
    assert len(record["per_class_iou"]) == 4
    assert 0.0 <= report.miou <= 1.0
    assert report.summary()["images"] == 2


def test_evaluate_is_deterministic(tiny_config):
    """Test two evaluations of the same model agree exactly."""
    vocabulary, scenes = generate_benchmark(tiny_config, "val")
    model = build_model(tiny_config)
    first = evaluate(model, scenes, vocabulary)
    second = evaluate(model, scenes, vocabulary)
    assert first.records == second.records


def test_unknown_ladder(tiny_config):
    """Test an unknown ladder name is rejected."""
    with pytest.raises(ValueError, match="unknown ablation ladder"):
        run_ablation_ladder(tiny_config, "widths", seeds=[0])


def test_depth_ladder(tiny_config, tmp_path):
    """Test one record per rung and seed, written to ablation_<ladder>.jsonl."""
    records = run_ablation_ladder(tiny_config, "depth", seeds=[0], iterations=1, out_dir=tmp_path)
    assert [r["rung"] for r in records] == [name for name, _ in LADDERS["depth"]]
    assert all(r["seed"] == 0 for r in records)
    assert len((tmp_path / "ablation_depth.jsonl").read_text().splitlines()) == 3


def test_summarize_ladder():
    """Test per-rung means keep rung order."""
    records = [
        {"rung": "b", "miou": 0.2, "false_positive_rate": 0.1},
        {"rung": "a", "miou": 0.5, "false_positive_rate": 0.0},
        {"rung": "b", "miou": 0.4, "false_positive_rate": 0.3},
    ]
    summary = summarize_ladder(records)
    assert list(summary) == ["b", "a"]
    assert summary["b"]["miou"] == pytest.approx(0.3)
    assert summary["b"]["false_positive_rate"] == pytest.approx(0.2)


def test_unseen_vocabulary_shares_only_background(tiny_config):
    """Test the transfer vocabulary keeps the background and nothing else seen."""
    seen, _ = generate_benchmark(tiny_config, "val", count=0)
    unseen = unseen_vocabulary(tiny_config, seen)
    assert unseen[0] == BACKGROUND
    assert len(unseen) == len(seen)
    assert set(seen) & set(unseen) == {BACKGROUND}


def test_transfer_eval(tiny_config, tmp_path):
    """Test the transfer record carries both vocabularies and both scores."""
    record = transfer_eval(tiny_config, iterations=1, out_dir=tmp_path)
    assert set(record) == {
        "seed", "seen_vocabulary", "unseen_vocabulary",
        "seen_miou", "unseen_miou", "unseen_false_positive_rate",
    }
    assert (tmp_path / "transfer.jsonl").exists()


@pytest.mark.slow
def test_core_ladder_is_monotone():
    """Test enabling the object prior, then fusion, then region alignment never lowers mean mIoU."""
    summary = summarize_ladder(run_ablation_ladder(ModelConfig(), "core"))
    means = [summary[name]["miou"] for name, _ in LADDERS["core"]]
    assert all(later >= earlier for earlier, later in zip(means, means[1:]))


@pytest.mark.slow
def test_full_prior_reduces_false_positives():
    """Test lambda = 1 hallucinates fewer pixels than lambda = 0 on 20 scenes with 4 present."""
    config = ModelConfig().with_overrides({
        "data.min_present": 4,
        "data.max_present": 4,
        "data.val_scenes": 20,
        "align.adaptive_prior": False,
    })
    rates = []
    for lam in (0.0, 1.0):
        _, report = train_and_evaluate(config.with_overrides({"align.prior_lambda": lam}), seed=0)
        rates.append(report.false_positive_rate)
    assert rates[1] < rates[0]
    assert np.isfinite(rates).all()
