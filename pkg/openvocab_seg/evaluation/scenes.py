"""Synthetic scenes: non-overlapping textured shapes over a textured background.

Each category is painted with its stub-encoder code laid out as a patch tile,
phase-locked to the patch grid, so a patch covered by category n encodes onto
n's text direction.
"""

import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from openvocab_seg.model.config import DataConfig, EncoderConfig, ModelConfig
from openvocab_seg.model.encoders import (
    PIXEL_MEAN,
    PIXEL_STD,
    category_code,
    category_texture,
    load_vocabulary,
    patch_dim,
    save_vocabulary,
)
from openvocab_seg.model.prior_align import region_bounds
from openvocab_seg.shared.embedding_store import read_tensors, write_tensors
from openvocab_seg.shared.models import ShapeKind, ShapePlacement, SyntheticScene


logger = logging.getLogger(__name__)

BACKGROUND = "background"

# Normalized texture amplitude: painted pixels read back as TEXTURE_GAIN * code
TEXTURE_GAIN = 4.0

# Shapes fill at least this fraction of their layout cell along each axis
MIN_CELL_FILL = 0.75

CANDIDATE_NAMES = (
    "apple", "bicycle", "bottle", "bowl", "book", "bench", "boat", "bridge", "cabinet", "candle",
    "car", "carpet", "chair", "clock", "cloud", "couch", "cup", "curtain", "desk", "door",
    "fence", "flower", "fork", "grass", "guitar", "hat", "helmet", "house", "kettle", "kite",
    "ladder", "lamp", "laptop", "leaf", "mirror", "mountain", "mug", "painting", "pillow", "plant",
    "plate", "river", "road", "rock", "rug", "sand", "shelf", "shoe", "sign", "sink",
    "sky", "snow", "sofa", "spoon", "stairs", "table", "tent", "tower", "tree", "truck",
    "umbrella", "vase", "wall", "water", "window", "wheel",
)

VAL_SPLIT_OFFSET = 500_000
SCENES_PER_SEED = 1_000_000


def candidate_pool() -> List[str]:
    """Candidate category names in a fixed order (plain names first, then numbered variants)."""
    pool = list(CANDIDATE_NAMES)
    for round_index in range(2, 40):
        pool.extend(f"{name} {round_index}" for name in CANDIDATE_NAMES)
    return pool


def benchmark_vocabulary(
    num_categories: int,
    encoder: EncoderConfig,
    max_overlap: float = 0.12,
    exclude: Sequence[str] = (),
) -> List[str]:
    """Greedily pick low-overlap categories; index 0 is always the background.

    A candidate is kept when its code has |cosine| below max_overlap with every
    code kept so far.

    Raises:
        ValueError: If the candidate pool runs out
    """
    dim = patch_dim(encoder.patch_size)
    names = [BACKGROUND]
    codes = [category_code(BACKGROUND, encoder.seed, dim)]
    excluded = set(exclude)
    for candidate in candidate_pool():
        if len(names) == num_categories:
            break
        if candidate in excluded:
            continue
        code = category_code(candidate, encoder.seed, dim)
        if np.max(np.abs(np.stack(codes) @ code)) < max_overlap:
            names.append(candidate)
            codes.append(code)
    if len(names) < num_categories:
        raise ValueError(
            f"only {len(names)} categories satisfy |cosine| < {max_overlap}; "
            f"lower data.num_categories or raise data.max_category_overlap"
        )
    return names


def _layout(num_shapes: int) -> Tuple[int, int]:
    if num_shapes <= 2:
        return 1, 2
    if num_shapes <= 4:
        return 2, 2
    if num_shapes <= 6:
        return 2, 3
    side = math.ceil(math.sqrt(num_shapes))
    return side, side


def _shape_mask(kind: ShapeKind, height: int, width: int) -> np.ndarray:
    if kind is ShapeKind.RECTANGLE:
        return np.ones((height, width), dtype=bool)
    yy = (np.arange(height) + 0.5 - height / 2.0) / (height / 2.0)
    xx = (np.arange(width) + 0.5 - width / 2.0) / (width / 2.0)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def paint(labels: np.ndarray, vocabulary: Sequence[str], encoder: EncoderConfig) -> np.ndarray:
    """Noise-free image for a label map.

    Each pixel shows its category's tile, phase-locked to the patch grid.
    """
    p = encoder.patch_size
    h0, w0 = labels.shape
    image = np.empty((h0, w0, 3), dtype=np.float64)
    rows = np.arange(h0) % p
    cols = np.arange(w0) % p
    for index in np.unique(labels):
        tile = category_texture(vocabulary[int(index)], encoder.seed, p)
        ys, xs = np.nonzero(labels == index)
        image[ys, xs] = PIXEL_MEAN + PIXEL_STD * TEXTURE_GAIN * tile[rows[ys], cols[xs]]
    return image


def gen_scene(
    seed: int,
    config: ModelConfig,
    vocabulary: Optional[Sequence[str]] = None,
    num_shapes: Optional[int] = None,
) -> SyntheticScene:
    """Deterministic synthetic scene.

    Args:
        seed: Scene seed
        config: Supplies data geometry and the encoder seed/patch size
        vocabulary: Category names with the background first
            (default: the benchmark vocabulary of config)
        num_shapes: Override the number of painted shapes (0 gives an all-background scene)

    Returns:
        SyntheticScene whose labels index into vocabulary
    """
    data: DataConfig = config.data
    if vocabulary is None:
        vocabulary = benchmark_vocabulary(
            data.num_categories, config.encoder, data.max_category_overlap
        )
    vocabulary = list(vocabulary)
    rng = np.random.default_rng([seed, 0x5CE7E])
    size = data.image_size
    if num_shapes is None:
        upper = min(data.max_present, len(vocabulary))
        lower = min(data.min_present, upper)
        num_shapes = int(rng.integers(lower, upper + 1)) - 1
    num_shapes = max(0, min(num_shapes, len(vocabulary) - 1))

    labels = np.zeros((size, size), dtype=np.int64)
    placements: List[ShapePlacement] = []
    if num_shapes:
        categories = rng.choice(np.arange(1, len(vocabulary)), size=num_shapes, replace=False)
        grid_rows, grid_cols = _layout(num_shapes)
        row_bounds = region_bounds(size, grid_rows)
        col_bounds = region_bounds(size, grid_cols)
        cells = rng.choice(grid_rows * grid_cols, size=num_shapes, replace=False)
        for category, cell in zip(categories.tolist(), cells.tolist()):
            gi, gj = divmod(cell, grid_cols)
            top0, bottom = row_bounds[gi], row_bounds[gi + 1]
            left0, right = col_bounds[gj], col_bounds[gj + 1]
            cell_h, cell_w = bottom - top0, right - left0
            height = int(rng.integers(max(1, math.ceil(MIN_CELL_FILL * cell_h)), cell_h + 1))
            width = int(rng.integers(max(1, math.ceil(MIN_CELL_FILL * cell_w)), cell_w + 1))
            top = top0 + int(rng.integers(0, cell_h - height + 1))
            left = left0 + int(rng.integers(0, cell_w - width + 1))
            kind = ShapeKind.RECTANGLE if rng.random() < 0.5 else ShapeKind.ELLIPSE
            mask = _shape_mask(kind, height, width)
            labels[top:top + height, left:left + width][mask] = category
            placements.append(ShapePlacement(
                kind=kind, category=int(category), top=top, left=left,
                height=height, width=width, area=int(mask.sum()),
            ))

    image = paint(labels, vocabulary, config.encoder)
    if data.noise > 0:
        image = image + data.noise * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SyntheticScene(
        image=image,
        labels=labels,
        mask=np.ones((size, size), dtype=np.uint8),
        vocabulary=vocabulary,
        present=sorted(int(i) for i in np.unique(labels)),
        placements=placements,
        background=0,
    )


def scene_seed(base_seed: int, split: str, index: int) -> int:
    offset = VAL_SPLIT_OFFSET if split == "val" else 0
    return base_seed * SCENES_PER_SEED + offset + index


def generate_benchmark(
    config: ModelConfig,
    split: str = "train",
    seed: Optional[int] = None,
    count: Optional[int] = None,
    vocabulary: Optional[Sequence[str]] = None,
) -> Tuple[List[str], List[SyntheticScene]]:
    """The seed-indexed synthetic benchmark split ('train' or 'val')."""
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    seed = config.seed if seed is None else seed
    data = config.data
    if vocabulary is None:
        vocabulary = benchmark_vocabulary(
            data.num_categories, config.encoder, data.max_category_overlap
        )
    if count is None:
        count = data.train_scenes if split == "train" else data.val_scenes
    scenes = [gen_scene(scene_seed(seed, split, i), config, vocabulary) for i in range(count)]
    logger.info(
        f"Generated {len(scenes)} {split} scene(s) over {len(vocabulary)} categories (seed {seed})"
    )
    return list(vocabulary), scenes


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Union[str, Path], image: np.ndarray) -> None:
    """Write an H×W×3 RGB float image in [0, 1] as a binary portable pixmap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(_to_uint8(image), cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write image {path}")


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read a pixmap as an H×W×3 RGB float64 image in [0, 1]."""
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise OSError(f"could not read image {path}")
    return cv2.cvtColor(data, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_scene_directory(
    directory: Union[str, Path],
    vocabulary: Sequence[str],
    scenes: Sequence[SyntheticScene],
    seeds: Optional[Sequence[int]] = None,
) -> Path:
    """Write scene_XXXX.ppm, scene_XXXX.labels.lgse, vocabulary.txt and scenes.jsonl."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_vocabulary(directory / "vocabulary.txt", vocabulary)
    records = []
    for index, scene in enumerate(scenes):
        stem = f"scene_{index:04d}"
        write_image(directory / f"{stem}.ppm", scene.image)
        write_tensors(directory / f"{stem}.labels.lgse", {
            "labels": scene.labels.astype(np.float64),
            "mask": scene.mask.astype(np.float64),
        })
        records.append({
            "scene": stem,
            "seed": None if seeds is None else int(seeds[index]),
            "present": scene.present,
            "placements": [
                {**asdict(placement), "kind": placement.kind.value}
                for placement in scene.placements
            ],
        })
    with open(directory / "scenes.jsonl", "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    logger.info(f"Wrote {len(scenes)} scene(s) to {directory}")
    return directory


def read_scene_directory(directory: Union[str, Path]) -> Tuple[List[str], List[SyntheticScene]]:
    """Load what write_scene_directory wrote (images come back 8-bit quantized)."""
    directory = Path(directory)
    vocabulary = load_vocabulary(directory / "vocabulary.txt")
    scenes = []
    with open(directory / "scenes.jsonl", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    for record in records:
        stem = record["scene"]
        tensors = read_tensors(directory / f"{stem}.labels.lgse")
        labels = tensors["labels"].astype(np.int64)
        placements = [
            ShapePlacement(**{**item, "kind": ShapeKind(item["kind"])})
            for item in record["placements"]
        ]
        scenes.append(SyntheticScene(
            image=read_image(directory / f"{stem}.ppm"),
            labels=labels,
            mask=tensors["mask"].astype(np.uint8),
            vocabulary=list(vocabulary),
            present=sorted(int(i) for i in np.unique(labels)),
            placements=placements,
            background=0,
        ))
    return vocabulary, scenes
