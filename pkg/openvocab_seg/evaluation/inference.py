"""Sliding-window inference with per-pixel hit counts."""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from openvocab_seg.shared.exceptions import ShapeError


logger = logging.getLogger(__name__)

# Maps B×h×w×3 pixels to B×N×h×w logits
Predictor = Callable[[torch.Tensor], torch.Tensor]


def window_starts(extent: int, window: int, stride: int) -> List[int]:
    """Window offsets along one axis; the last window is flush with the edge."""
    if extent <= window:
        return [0]
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def model_predictor(model, vocabulary) -> Predictor:
    """Wrap a segmenter and a vocabulary as a gradient-free predictor."""
    def predict(pixels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return model(pixels, vocabulary)
    return predict


def sliding_window_infer(
    predict: Predictor,
    image: Union[np.ndarray, torch.Tensor],
    window: int,
    stride: Optional[int] = None,
    return_hits: bool = False,
) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """Average per-window logits over an H0×W0×3 image.

    Args:
        predict: Batched predictor
        image: H0×W0×3 pixels
        window: Square window side
        stride: Offset between windows (default window // 2)
        return_hits: Also return the H0×W0 hit-count map

    Returns:
        N×H0×W0 logits; an image no larger than the window gets one direct pass

    Raises:
        ValueError: If stride is not in [1, window]
    """
    stride = max(1, window // 2) if stride is None else stride
    if not 1 <= stride <= window:
        raise ValueError(f"stride must lie in [1, window]: stride {stride}, window {window}")
    pixels = torch.as_tensor(image)
    if pixels.dim() != 3:
        raise ShapeError(
            f"sliding_window_infer takes one H0×W0×3 image, got {tuple(pixels.shape)}"
        )
    h0, w0, _ = pixels.shape

    if h0 <= window and w0 <= window:
        logits = predict(pixels.unsqueeze(0))[0]
        hits = torch.ones(h0, w0, dtype=torch.long)
        return (logits, hits) if return_hits else logits

    win_h, win_w = min(window, h0), min(window, w0)
    total: Optional[torch.Tensor] = None
    hits = torch.zeros(h0, w0, dtype=torch.long)
    for top in window_starts(h0, window, stride):
        for left in window_starts(w0, window, stride):
            crop = pixels[top:top + win_h, left:left + win_w].unsqueeze(0)
            logits = predict(crop)[0]
            if total is None:
                total = logits.new_zeros(logits.shape[0], h0, w0)
            total[:, top:top + win_h, left:left + win_w] += logits
            hits[top:top + win_h, left:left + win_w] += 1
    assert total is not None
    if int(hits.min()) < 1:
        raise ShapeError("sliding window left pixels uncovered")
    logger.debug(
        f"sliding_window_infer: {h0}×{w0} image, window {window}, stride {stride}, "
        f"max hits {int(hits.max())}"
    )
    result = total / hits.to(total.dtype)
    return (result, hits) if return_hits else result


def predict_labels(
    predict: Predictor,
    images: Sequence[np.ndarray],
    window: int,
    stride: Optional[int] = None,
) -> List[np.ndarray]:
    """Argmax label maps for a list of images."""
    return [
        sliding_window_infer(predict, image, window, stride).argmax(dim=0).cpu().numpy()
        for image in images
    ]
