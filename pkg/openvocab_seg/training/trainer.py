"""Training loop: seeded shuffling and flips, cached stub features, LGSE checkpoints."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from openvocab_seg.model.assembly import OpenVocabSegmenter
from openvocab_seg.model.config import ModelConfig
from openvocab_seg.model.decoder import bce_loss
from openvocab_seg.shared.embedding_store import read_tensors, write_tensors
from openvocab_seg.shared.exceptions import NumericalError
from openvocab_seg.shared.models import EncodedImage, Supervision, SyntheticScene, VocabularySpec
from openvocab_seg.training.schedule import (
    build_optimizer,
    current_lr,
    optimizer_step,
    restore_schedule,
)


logger = logging.getLogger(__name__)

PARAM_PREFIX = "param/"
OPTIM_PREFIX = "optim/"
STEP_KEY = "meta/step"
TRAIN_LOG = "train_log.jsonl"

# Stream tags keeping shuffling and flip draws independent
SHUFFLE_STREAM = 0x5487
FLIP_STREAM = 0xF11B

TREND_WINDOW = 50


@dataclass
class TrainResult:
    """Outcome of a training run."""
    losses: List[float] = field(default_factory=list)
    steps: int = 0
    checkpoints: List[Path] = field(default_factory=list)


def save_checkpoint(
    path: Union[str, Path],
    model: OpenVocabSegmenter,
    optimizer=None,
    step: int = 0,
) -> Path:
    """Named parameters, AdamW moments and the step counter as one LGSE file."""
    entries: Dict[str, torch.Tensor] = {}
    names = {id(p): name for name, p in model.named_parameters()}
    for name, param in model.named_parameters():
        entries[PARAM_PREFIX + name] = param.detach()
    if optimizer is not None:
        for group in optimizer.param_groups:
            for param in group["params"]:
                state = optimizer.state.get(param, {})
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in state:
                        entries[f"{OPTIM_PREFIX}{names[id(param)]}/{key}"] = state[key]
    entries[STEP_KEY] = torch.tensor([float(step)], dtype=torch.float64)
    write_tensors(path, entries)
    logger.info(f"Wrote checkpoint {path} (step {step})")
    return Path(path)


def load_checkpoint(path: Union[str, Path], model: OpenVocabSegmenter, optimizer=None) -> int:
    """Restore parameters (and moments when optimizer is given); returns the stored step.

    Raises:
        ValueError: If the checkpoint does not match the model's parameters
    """
    entries = read_tensors(path)
    params = dict(model.named_parameters())
    stored = {k[len(PARAM_PREFIX):] for k in entries if k.startswith(PARAM_PREFIX)}
    if stored != set(params):
        missing = sorted(set(params) - stored)
        extra = sorted(stored - set(params))
        raise ValueError(
            f"checkpoint {path} does not match the model: missing {missing}, unexpected {extra}"
        )
    step = int(entries[STEP_KEY][0]) if STEP_KEY in entries else 0
    with torch.no_grad():
        for name, param in params.items():
            value = torch.from_numpy(entries[PARAM_PREFIX + name])
            if value.shape != param.shape:
                raise ValueError(
                    f"checkpoint {path}: {name} has shape {tuple(value.shape)}, "
                    f"model expects {tuple(param.shape)}"
                )
            param.copy_(value.to(param.dtype))
    if optimizer is not None:
        for name, param in params.items():
            avg = entries.get(f"{OPTIM_PREFIX}{name}/exp_avg")
            avg_sq = entries.get(f"{OPTIM_PREFIX}{name}/exp_avg_sq")
            if avg is None or avg_sq is None:
                continue
            optimizer.state[param] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(avg).to(param.dtype),
                "exp_avg_sq": torch.from_numpy(avg_sq).to(param.dtype),
            }
    logger.info(f"Loaded checkpoint {path} (step {step})")
    return step


class Trainer:
    """Runs the optimizer over a list of scenes for a fixed number of steps."""

    def __init__(
        self,
        model: OpenVocabSegmenter,
        config: Optional[ModelConfig] = None,
        out_dir: Optional[Path] = None,
    ):
        self.model = model
        self.config = config or model.config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        groups = model.parameter_groups()
        self.optimizer, self.scheduler = build_optimizer(groups, self.config.training)
        self._feature_cache: Dict[Tuple[int, bool], EncodedImage] = {}

    def batch_plan(self, step: int, num_scenes: int) -> List[Tuple[int, bool]]:
        """(scene index, flipped) items of a step; a pure function of (seed, step)."""
        cfg = self.config.training
        items = []
        for i in range(cfg.batch_size):
            position = step * cfg.batch_size + i
            epoch, offset = divmod(position, num_scenes)
            shuffle = np.random.default_rng([self.config.seed, SHUFFLE_STREAM, epoch])
            order = shuffle.permutation(num_scenes)
            flip = False
            if cfg.horizontal_flip:
                draw = np.random.default_rng([self.config.seed, FLIP_STREAM, step, i]).random()
                flip = bool(draw < 0.5)
            items.append((int(order[offset]), flip))
        return items

    def _features(self, scenes: Sequence[SyntheticScene], index: int, flip: bool) -> EncodedImage:
        key = (index, flip)
        if self.config.encoder.trainable or key not in self._feature_cache:
            scene = scenes[index].flipped() if flip else scenes[index]
            encoded = self.model.encode_images(torch.from_numpy(scene.image).unsqueeze(0))
            if self.config.encoder.trainable:
                return encoded
            self._feature_cache[key] = encoded
        return self._feature_cache[key]

    def _batch(
        self, scenes: Sequence[SyntheticScene], plan: List[Tuple[int, bool]], num_categories: int
    ) -> Tuple[EncodedImage, Supervision, np.ndarray]:
        encoded = EncodedImage.concat([self._features(scenes, i, f) for i, f in plan])
        labels, masks, images = [], [], []
        for index, flip in plan:
            scene = scenes[index].flipped() if flip else scenes[index]
            labels.append(scene.labels)
            masks.append(scene.mask)
            images.append(scene.image)
        supervision = Supervision.from_labels(
            torch.from_numpy(np.stack(labels)),
            torch.from_numpy(np.stack(masks)),
            num_categories,
            self.model.dtype,
        )
        return encoded, supervision, np.stack(images)

    def _dump_batch(
        self,
        step: int,
        images: np.ndarray,
        supervision: Supervision,
        logits: torch.Tensor,
    ) -> Optional[str]:
        if self.out_dir is None:
            return None
        path = self.out_dir / f"nan_batch_step{step:06d}.lgse"
        write_tensors(path, {
            "images": images.astype(np.float64),
            "Y": supervision.Y,
            "M": supervision.M,
            "logits": logits.detach(),
        })
        return str(path)

    def train(
        self,
        scenes: Sequence[SyntheticScene],
        vocabulary: Union[VocabularySpec, Sequence[str]],
        iterations: Optional[int] = None,
        start_step: int = 0,
    ) -> TrainResult:
        """Run optimizer steps start_step .. iterations - 1.

        Raises:
            NumericalError: On a NaN loss (the batch is dumped to out_dir) or a non-finite gradient
        """
        if not isinstance(vocabulary, VocabularySpec):
            vocabulary = VocabularySpec(categories=list(vocabulary))
        cfg = self.config.training
        total = cfg.iterations if iterations is None else iterations
        height, width = scenes[0].labels.shape if scenes else (0, 0)
        result = TrainResult(steps=start_step)
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self.out_dir / TRAIN_LOG, "a" if start_step else "w", encoding="utf-8")
        if start_step:
            restore_schedule(self.optimizer, self.scheduler, start_step)

        self.model.train()
        try:
            for step in range(start_step, total):
                plan = self.batch_plan(step, len(scenes))
                encoded, supervision, images = self._batch(scenes, plan, vocabulary.num_categories)
                lr = current_lr(self.optimizer)
                logits = self.model(encoded, vocabulary, output_size=(height, width))
                try:
                    loss = bce_loss(logits, supervision.Y, supervision.M)
                    if not bool(torch.isfinite(loss)):
                        raise NumericalError(f"loss is {float(loss)}")
                except NumericalError as e:
                    dump = self._dump_batch(step, images, supervision, logits)
                    logger.error(f"Non-finite loss at step {step} ({e}); batch dumped to {dump}")
                    raise NumericalError(f"non-finite loss at step {step}", dump_path=dump) from e
                self.optimizer.zero_grad(set_to_none=False)
                loss.backward()
                optimizer_step(self.optimizer, self.scheduler)

                value = float(loss.detach())
                result.losses.append(value)
                result.steps = step + 1
                if log_file is not None:
                    log_file.write(json.dumps({"step": step, "loss": value, "lr": lr}) + "\n")
                if step % cfg.log_interval == 0 or step == total - 1:
                    logger.info(f"step {step}/{total} loss {value:.6f} lr {lr:.3e}")
                interval = cfg.checkpoint_interval
                if self.out_dir is not None and interval and (step + 1) % interval == 0:
                    path = self.out_dir / "checkpoints" / f"step_{step + 1:06d}.lgse"
                    saved = save_checkpoint(path, self.model, self.optimizer, step + 1)
                    result.checkpoints.append(saved)
        finally:
            if log_file is not None:
                log_file.close()
            self.model.eval()

        if len(result.losses) >= 2 * TREND_WINDOW:
            share = window_trend(result.losses)
            logger.info(f"loss did not rise in {share:.0%} of {TREND_WINDOW}-step windows")

        if self.out_dir is not None:
            path = self.out_dir / "checkpoints" / "final.lgse"
            saved = save_checkpoint(path, self.model, self.optimizer, result.steps)
            result.checkpoints.append(saved)
        return result


def window_trend(losses: Sequence[float], window: int = TREND_WINDOW) -> float:
    """Fraction of consecutive window pairs whose mean loss did not rise.

    Losses are cut into back-to-back blocks of `window` steps (a trailing partial
    block is dropped); a pair counts when the later block's mean is at most the
    earlier one's. Returns 1.0 when fewer than two full blocks exist.
    """
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    blocks = len(losses) // window
    if blocks < 2:
        return 1.0
    means = np.asarray(losses[: blocks * window], dtype=np.float64).reshape(blocks, window)
    means = means.mean(axis=1)
    return float(np.mean(means[1:] <= means[:-1]))


def train(
    model: OpenVocabSegmenter,
    scenes: Sequence[SyntheticScene],
    vocabulary: Union[VocabularySpec, Sequence[str]],
    config: Optional[ModelConfig] = None,
    out_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
) -> TrainResult:
    """Train model in place on scenes; seeds come from config.seed."""
    trainer = Trainer(model, config, out_dir)
    start = load_checkpoint(resume, model, trainer.optimizer) if resume is not None else 0
    return trainer.train(scenes, vocabulary, start_step=start)
