"""Benchmark runs: per-image evaluation, ablation ladders and unseen-vocabulary transfer."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from openvocab_seg.evaluation.inference import model_predictor, sliding_window_infer
from openvocab_seg.evaluation.metrics import MetricAccumulator
from openvocab_seg.evaluation.scenes import BACKGROUND, benchmark_vocabulary, generate_benchmark
from openvocab_seg.model.assembly import OpenVocabSegmenter, build_model
from openvocab_seg.model.config import ModelConfig
from openvocab_seg.shared.models import SyntheticScene, VocabularySpec
from openvocab_seg.training.trainer import Trainer


logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
DEFAULT_ABLATION_SEEDS = (0, 1, 2, 3, 4)

# Each rung is (name, dotted config overrides)
LADDERS: Dict[str, List[Tuple[str, Dict[str, object]]]] = {
    "core": [
        ("none", {
            "ablation.use_object_prior": False,
            "ablation.use_ccf": False,
            "ablation.use_region_alignment": False,
        }),
        ("OP", {
            "ablation.use_object_prior": True,
            "ablation.use_ccf": False,
            "ablation.use_region_alignment": False,
        }),
        ("OP+CCF", {
            "ablation.use_object_prior": True,
            "ablation.use_ccf": True,
            "ablation.use_region_alignment": False,
        }),
        ("OP+CCF+RA", {
            "ablation.use_object_prior": True,
            "ablation.use_ccf": True,
            "ablation.use_region_alignment": True,
        }),
    ],
    "lambda": [
        ("lambda=0", {"align.prior_lambda": 0.0, "align.adaptive_prior": False}),
        ("lambda=0.5", {"align.prior_lambda": 0.5, "align.adaptive_prior": False}),
        ("lambda=adaptive", {"align.adaptive_prior": True}),
        ("lambda=1", {"align.prior_lambda": 1.0, "align.adaptive_prior": False}),
    ],
    "grid": [(f"r={r}", {"align.region_grid": r}) for r in (4, 6, 8)],
    "depth": [(f"depth={d}", {"fusion.depth": d}) for d in (1, 2, 3)],
    "fusion": [
        ("LQ", {
            "fusion.use_language_query": True,
            "fusion.use_global_context": False,
            "fusion.use_directional_attention": False,
        }),
        ("LQ+GC", {
            "fusion.use_language_query": True,
            "fusion.use_global_context": True,
            "fusion.use_directional_attention": False,
        }),
        ("LQ+GC+DA", {
            "fusion.use_language_query": True,
            "fusion.use_global_context": True,
            "fusion.use_directional_attention": True,
        }),
    ],
}


@dataclass
class EvalReport:
    """Dataset-level metrics plus one record per image."""
    miou: float
    per_class: List[Optional[float]]
    false_positive_rate: float
    records: List[Dict[str, object]] = field(default_factory=list)

    def summary(self) -> Dict[str, object]:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class,
            "false_positive_rate": self.false_positive_rate,
            "images": len(self.records),
        }


def write_jsonl(path: Union[str, Path], records: Sequence[Dict[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


def evaluate(
    model: OpenVocabSegmenter,
    scenes: Sequence[SyntheticScene],
    vocabulary: Union[VocabularySpec, Sequence[str]],
    window: Optional[int] = None,
    stride: Optional[int] = None,
    out_path: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """Sliding-window predictions scored against each scene's labels.

    Args:
        model: Segmenter to evaluate
        scenes: Scenes whose labels index into vocabulary
        vocabulary: Category names (or a VocabularySpec) in label order
        window: Window side (default: config eval.window)
        stride: Window stride (default: config eval.stride, else window // 2)
        out_path: Optional JSONL file for the per-image records

    Returns:
        EvalReport with the confusion-accumulated mIoU and the hallucination rate
    """
    if not isinstance(vocabulary, VocabularySpec):
        vocabulary = VocabularySpec(categories=list(vocabulary))
    eval_cfg = model.config.eval
    window = window or eval_cfg.window
    stride = stride if stride is not None else eval_cfg.resolved_stride
    predict = model_predictor(model, vocabulary)
    accumulator = MetricAccumulator(vocabulary.num_categories)
    model.eval()
    for index, scene in enumerate(scenes):
        logits = sliding_window_infer(predict, scene.image, window, stride)
        pred = logits.argmax(dim=0).cpu().numpy()
        name = f"scene_{index:04d}"
        accumulator.add(pred, scene.labels, scene.mask, name=name, present=scene.present)
    result = accumulator.result
    report = EvalReport(
        miou=result.miou,
        per_class=result.to_record()["per_class_iou"],
        false_positive_rate=accumulator.false_positive_rate,
        records=accumulator.records,
    )
    logger.info(
        f"Evaluated {len(scenes)} scene(s): mIoU {report.miou:.4f}, "
        f"false-positive rate {report.false_positive_rate:.4f}"
    )
    if out_path is not None:
        write_jsonl(out_path, report.records)
    return report


def train_and_evaluate(
    config: ModelConfig,
    seed: int,
    iterations: Optional[int] = None,
    out_dir: Optional[Path] = None,
) -> Tuple[OpenVocabSegmenter, EvalReport]:
    """Fresh model on the seed's benchmark: train on its train split, score its val split."""
    config = config.with_overrides({"seed": seed})
    vocabulary, train_scenes = generate_benchmark(config, "train", seed=seed)
    _, val_scenes = generate_benchmark(config, "val", seed=seed, vocabulary=vocabulary)
    model = build_model(config)
    Trainer(model, config, out_dir).train(train_scenes, vocabulary, iterations=iterations)
    return model, evaluate(model, val_scenes, vocabulary)


def run_ablation_ladder(
    config: ModelConfig,
    ladder: str = "core",
    seeds: Sequence[int] = DEFAULT_ABLATION_SEEDS,
    iterations: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[Dict[str, object]]:
    """Train and evaluate every rung of a ladder once per seed.

    Returns:
        One record per (rung, seed) with validation mIoU and false-positive rate

    Raises:
        ValueError: If the ladder name is unknown
    """
    if ladder not in LADDERS:
        raise ValueError(f"unknown ablation ladder {ladder!r}; choose from {sorted(LADDERS)}")
    records: List[Dict[str, object]] = []
    for rung, overrides in LADDERS[ladder]:
        rung_config = config.with_overrides(overrides)
        for seed in seeds:
            logger.info(f"Ablation {ladder}: rung {rung}, seed {seed}")
            _, report = train_and_evaluate(rung_config, seed, iterations)
            records.append({
                "ladder": ladder,
                "rung": rung,
                "seed": int(seed),
                "miou": report.miou,
                "false_positive_rate": report.false_positive_rate,
            })
    if out_dir is not None:
        write_jsonl(Path(out_dir) / f"ablation_{ladder}.jsonl", records)
    return records


def summarize_ladder(records: Sequence[Dict[str, object]]) -> Dict[str, Dict[str, float]]:
    """Mean mIoU and false-positive rate per rung, in rung order."""
    summary: Dict[str, Dict[str, List[float]]] = {}
    for record in records:
        entry = summary.setdefault(str(record["rung"]), {"miou": [], "false_positive_rate": []})
        entry["miou"].append(float(record["miou"]))
        entry["false_positive_rate"].append(float(record["false_positive_rate"]))
    return {
        rung: {metric: float(np.mean(values)) for metric, values in entry.items()}
        for rung, entry in summary.items()
    }


def unseen_vocabulary(config: ModelConfig, seen: Sequence[str]) -> List[str]:
    """Benchmark vocabulary sharing only the background with seen."""
    data = config.data
    return benchmark_vocabulary(
        data.num_categories,
        config.encoder,
        data.max_category_overlap,
        exclude=[name for name in seen if name != BACKGROUND],
    )


def transfer_eval(
    config: ModelConfig,
    seed: Optional[int] = None,
    iterations: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, object]:
    """Train on one category pool, then score validation scenes of categories never trained on."""
    seed = config.seed if seed is None else seed
    model, seen_report = train_and_evaluate(config, seed, iterations)
    seen, _ = generate_benchmark(config, "val", seed=seed, count=0)
    unseen = unseen_vocabulary(config, seen)
    _, unseen_scenes = generate_benchmark(config, "val", seed=seed, vocabulary=unseen)
    unseen_report = evaluate(model, unseen_scenes, unseen)
    record = {
        "seed": int(seed),
        "seen_vocabulary": list(seen),
        "unseen_vocabulary": unseen,
        "seen_miou": seen_report.miou,
        "unseen_miou": unseen_report.miou,
        "unseen_false_positive_rate": unseen_report.false_positive_rate,
    }
    logger.info(f"Transfer: seen mIoU {seen_report.miou:.4f}, unseen mIoU {unseen_report.miou:.4f}")
    if out_dir is not None:
        write_jsonl(Path(out_dir) / "transfer.jsonl", [record])
    return record
