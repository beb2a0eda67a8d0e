"""Command-line entry point: openvocab-seg <command> [options].

Exit codes: 0 on success, 1 on invalid configuration or input, 2 on a
numerical failure (NaN loss, non-finite gradient, failed gradient check).
"""

import argparse
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

import openvocab_seg
from openvocab_seg.evaluation.benchmark import (
    DEFAULT_ABLATION_SEEDS,
    LADDERS,
    evaluate,
    run_ablation_ladder,
    summarize_ladder,
    transfer_eval,
    write_jsonl,
)
from openvocab_seg.evaluation.gradcheck import run_gradcheck_suite
from openvocab_seg.evaluation.heatmaps import dump_heatmaps
from openvocab_seg.evaluation.inference import model_predictor, sliding_window_infer
from openvocab_seg.evaluation.scenes import (
    benchmark_vocabulary,
    gen_scene,
    generate_benchmark,
    read_image,
    read_scene_directory,
    scene_seed,
    write_scene_directory,
)
from openvocab_seg.model.assembly import OpenVocabSegmenter, build_model
from openvocab_seg.model.config import ModelConfig, dump_config, load_config
from openvocab_seg.model.encoders import load_vocabulary, save_vocabulary
from openvocab_seg.shared.embedding_store import write_tensors
from openvocab_seg.shared.exceptions import ConfigurationError, NumericalError
from openvocab_seg.shared.models import VocabularySpec
from openvocab_seg.training.trainer import load_checkpoint, train


logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
MANIFEST = "manifest.json"
DEFAULT_OUT = "out"


class CommandLineError(ConfigurationError):
    """Unknown flag or malformed argument."""

    def __init__(self, message: str):
        super().__init__([], message)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so run() owns the exit code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise CommandLineError(f"{self.prog}: {message}")


def _common_flags() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key-value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path(DEFAULT_OUT), help="output directory")
    common.add_argument("--precision", choices=["f32", "f64"], help="override the config precision")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="log level",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="openvocab-seg", description="Open-vocabulary segmentation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark to disk")
    gen.add_argument("--split", choices=["train", "val", "both"], default="both")
    gen.add_argument("--count", type=int, help="scenes per split (default: from config)")

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--data", type=Path, help="scene directory written by gen-data")
    tr.add_argument("--resume", type=Path, help="checkpoint to resume from")
    tr.add_argument("--iterations", type=int, help="override training.iterations")

    ev = sub.add_parser("eval", parents=[common], help="score a model on validation scenes")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--data", type=Path, help="scene directory written by gen-data")

    inf = sub.add_parser("infer", parents=[common], help="segment one image")
    inf.add_argument("--checkpoint", type=Path)
    inf.add_argument("--image", type=Path, help="portable pixmap (default: a generated scene)")
    inf.add_argument("--vocab", type=Path, help="vocabulary file (default: benchmark vocabulary)")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every stage")

    heat = sub.add_parser("dump-heatmaps", parents=[common], help="render region-category heatmaps")
    heat.add_argument("--checkpoint", type=Path)
    heat.add_argument("--image", type=Path)
    heat.add_argument("--vocab", type=Path)

    sub.add_parser("print-config", parents=[common], help="print the resolved configuration")

    abl = sub.add_parser("ablation", parents=[common], help="train and score an ablation ladder")
    abl.add_argument("--ladder", choices=sorted(LADDERS), default="core")
    abl.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_ABLATION_SEEDS))
    abl.add_argument("--iterations", type=int, help="override training.iterations per rung")

    tf = sub.add_parser("transfer", parents=[common], help="score on a vocabulary never trained on")
    tf.add_argument("--iterations", type=int, help="override training.iterations")
    return parser


def resolve_config(args: argparse.Namespace) -> ModelConfig:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if getattr(args, "iterations", None) is not None:
        overrides["training.iterations"] = args.iterations
    return load_config(args.config, overrides=overrides)


def write_manifest(out: Path, argv: Sequence[str], config: ModelConfig) -> Path:
    """Record argv, the resolved config and library versions."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": list(argv),
        "seed": config.seed,
        "precision": config.precision.value,
        "config": config.model_dump(mode="json"),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "openvocab_seg": openvocab_seg.__version__,
        },
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _model(config: ModelConfig, checkpoint: Optional[Path]) -> OpenVocabSegmenter:
    model = build_model(config)
    if checkpoint is not None:
        load_checkpoint(checkpoint, model)
    model.eval()
    return model


def _vocabulary(config: ModelConfig, path: Optional[Path]) -> List[str]:
    if path is not None:
        return load_vocabulary(path)
    data = config.data
    return benchmark_vocabulary(data.num_categories, config.encoder, data.max_category_overlap)


def _image(config: ModelConfig, path: Optional[Path], vocabulary: Sequence[str]) -> np.ndarray:
    if path is not None:
        return read_image(path)
    return gen_scene(scene_seed(config.seed, "val", 0), config, vocabulary).image


def _emit(record: Dict[str, Any]) -> None:
    print(json.dumps(record))


def cmd_gen_data(args: argparse.Namespace, config: ModelConfig) -> None:
    splits: Tuple[str, ...] = ("train", "val") if args.split == "both" else (args.split,)
    for split in splits:
        vocabulary, scenes = generate_benchmark(config, split, count=args.count)
        seeds = [scene_seed(config.seed, split, i) for i in range(len(scenes))]
        write_scene_directory(args.out / split, vocabulary, scenes, seeds)
        _emit({"split": split, "scenes": len(scenes), "directory": str(args.out / split)})


def cmd_train(args: argparse.Namespace, config: ModelConfig) -> None:
    if args.data is not None:
        vocabulary, scenes = read_scene_directory(args.data)
    else:
        vocabulary, scenes = generate_benchmark(config, "train")
    save_vocabulary(args.out / "vocabulary.txt", vocabulary)
    model = build_model(config)
    result = train(model, scenes, vocabulary, config, args.out, resume=args.resume)
    _emit({
        "steps": result.steps,
        "final_loss": result.losses[-1] if result.losses else None,
        "checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
    })


def cmd_eval(args: argparse.Namespace, config: ModelConfig) -> None:
    if args.data is not None:
        vocabulary, scenes = read_scene_directory(args.data)
    else:
        vocabulary, scenes = generate_benchmark(config, "val")
    model = _model(config, args.checkpoint)
    report = evaluate(model, scenes, vocabulary, out_path=args.out / "metrics.jsonl")
    write_jsonl(args.out / "summary.jsonl", [report.summary()])
    _emit(report.summary())


def cmd_infer(args: argparse.Namespace, config: ModelConfig) -> None:
    vocabulary = _vocabulary(config, args.vocab)
    image = _image(config, args.image, vocabulary)
    model = _model(config, args.checkpoint)
    predict = model_predictor(model, VocabularySpec(categories=vocabulary))
    logits = sliding_window_infer(predict, image, config.eval.window, config.eval.resolved_stride)
    labels = logits.argmax(dim=0).cpu().numpy()
    write_tensors(args.out / "prediction.labels.lgse", {
        "labels": labels.astype(np.float64),
        "logits": logits,
    })
    if not cv2.imwrite(str(args.out / "prediction.pgm"), labels.astype(np.uint8)):
        raise OSError(f"could not write {args.out / 'prediction.pgm'}")
    save_vocabulary(args.out / "vocabulary.txt", vocabulary)
    counts = np.bincount(labels.reshape(-1), minlength=len(vocabulary))
    _emit({"pixels": {name: int(c) for name, c in zip(vocabulary, counts) if c}})


def cmd_gradcheck(args: argparse.Namespace, config: ModelConfig) -> None:
    if config.dtype != torch.float64:
        logger.warning("gradcheck always runs at f64; --precision is ignored")
    records = run_gradcheck_suite(config.seed)
    write_jsonl(args.out / "gradcheck.jsonl", records)
    for record in records:
        _emit(record)
    failed = [r["module"] for r in records if not r["passed"]]
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")


def cmd_dump_heatmaps(args: argparse.Namespace, config: ModelConfig) -> None:
    vocabulary = _vocabulary(config, args.vocab)
    image = _image(config, args.image, vocabulary)
    model = _model(config, args.checkpoint)
    with torch.no_grad():
        pixels = torch.from_numpy(image).unsqueeze(0)
        _, trace = model(pixels, VocabularySpec(categories=vocabulary), trace=True)
    written = dump_heatmaps(trace, args.out / "heatmaps")
    _emit({"images": len(written), "directory": str(args.out / "heatmaps")})


def cmd_print_config(args: argparse.Namespace, config: ModelConfig) -> None:
    text = dump_config(config)
    (args.out / "config.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_ablation(args: argparse.Namespace, config: ModelConfig) -> None:
    records = run_ablation_ladder(config, args.ladder, args.seeds, out_dir=args.out)
    for rung, metrics in summarize_ladder(records).items():
        _emit({"ladder": args.ladder, "rung": rung, **metrics})


def cmd_transfer(args: argparse.Namespace, config: ModelConfig) -> None:
    _emit(transfer_eval(config, out_dir=args.out))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "dump-heatmaps": cmd_dump_heatmaps,
    "print-config": cmd_print_config,
    "ablation": cmd_ablation,
    "transfer": cmd_transfer,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and map failures to exit codes."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else getattr(logging, args.log_level),
            format=LOG_FORMAT,
        )
        torch.set_num_threads(1)
        config = resolve_config(args)
        write_manifest(args.out, argv, config)
        COMMANDS[args.command](args, config)
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return 2
    except CommandLineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ConfigurationError as e:
        print(f"error: invalid configuration (validate_config): {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        logger.error(f"Command failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
