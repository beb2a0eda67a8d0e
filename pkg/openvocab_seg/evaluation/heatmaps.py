"""Region-category heatmaps: similarity A and region weights w as graymaps plus a sidecar."""

import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import cv2
import numpy as np
import torch

from openvocab_seg.shared.models import AlignmentState, ForwardTrace


logger = logging.getLogger(__name__)

SIDECAR = "heatmaps.jsonl"


def _grid(values: np.ndarray, r: int) -> np.ndarray:
    return values.reshape(r, r)


def similarity_image(column: np.ndarray, r: int) -> np.ndarray:
    """A column in [-1, 1] -> r×r uint8 (-1 black, 1 white)."""
    return np.rint((np.clip(_grid(column, r), -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def weight_image(column: np.ndarray, r: int) -> np.ndarray:
    """A w column scaled by its maximum -> r×r uint8."""
    peak = float(column.max())
    scaled = column / peak if peak > 0 else np.zeros_like(column)
    return np.rint(_grid(scaled, r) * 255.0).astype(np.uint8)


def _write_pgm(path: Path, image: np.ndarray) -> None:
    if not cv2.imwrite(str(path), image):
        raise OSError(f"could not write heatmap {path}")


def dump_heatmaps(
    source: Union[ForwardTrace, AlignmentState],
    directory: Union[str, Path],
    categories: Optional[Sequence[str]] = None,
    item: int = 0,
    region_grid: Optional[int] = None,
) -> List[Path]:
    """Write A_<n>.pgm and w_<n>.pgm for every category plus a heatmaps.jsonl sidecar.

    Args:
        source: A forward trace (caller category order) or an alignment state
        directory: Output directory (created if missing)
        categories: Names for the sidecar (default: the trace's categories)
        item: Batch item to render
        region_grid: Grid side r (default: the state's partition, else sqrt(K))

    Returns:
        Paths of the written images

    Raises:
        OSError: If the directory or a file cannot be written
        ValueError: If the source carries no alignment maps
    """
    if source.A is None or source.w is None:
        raise ValueError("no region alignment maps to render (region alignment disabled?)")
    A = source.A.detach().to(torch.float64).cpu().numpy()
    w = source.w.detach().to(torch.float64).cpu().numpy()
    if A.ndim == 3:
        A, w = A[item], w[item]
    k, n = A.shape
    if region_grid is None:
        regions = getattr(source, "regions", None)
        if regions is None and getattr(source, "alignment", None) is not None:
            regions = source.alignment.regions
        region_grid = regions.r if regions is not None else int(round(np.sqrt(k)))
    if region_grid * region_grid != k:
        raise ValueError(f"{k} regions do not form a {region_grid}×{region_grid} grid")
    if categories is None:
        categories = getattr(source, "categories", None) or [str(i) for i in range(n)]

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    with open(directory / SIDECAR, "w", encoding="utf-8") as sidecar:
        for index in range(n):
            a_path = directory / f"A_{index:03d}.pgm"
            w_path = directory / f"w_{index:03d}.pgm"
            _write_pgm(a_path, similarity_image(A[:, index], region_grid))
            _write_pgm(w_path, weight_image(w[:, index], region_grid))
            written += [a_path, w_path]
            sidecar.write(json.dumps({
                "index": index,
                "category": categories[index],
                "r": region_grid,
                "A": A[:, index].tolist(),
                "w": w[:, index].tolist(),
            }) + "\n")
    logger.info(f"Wrote {len(written)} heatmap(s) for {n} categories to {directory}")
    return written


def read_heatmap_sidecar(directory: Union[str, Path]) -> List[dict]:
    with open(Path(directory) / SIDECAR, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
