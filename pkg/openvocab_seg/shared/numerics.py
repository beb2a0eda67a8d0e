"""Dense tensor kernels and finite-difference gradient checking.

Every kernel is a pure function of its inputs. Reverse-mode differentiation is
torch autograd: one graph per step, swept in reverse tape order.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from openvocab_seg.shared.exceptions import NumericalError, ShapeError
from openvocab_seg.shared.models import CosineResult


logger = logging.getLogger(__name__)

# Norms below this are treated as degenerate: cosine is defined as 0
DEGENERATE_NORM = 1e-12


def ensure_finite(x: torch.Tensor, name: str) -> torch.Tensor:
    """Raise NumericalError if x holds NaN or Inf, else return x unchanged."""
    if not bool(torch.isfinite(x).all()):
        bad = int((~torch.isfinite(x)).sum())
        raise NumericalError(
            f"{name}: {bad} non-finite value(s) in tensor of shape {tuple(x.shape)}"
        )
    return x


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> CosineResult:
    """Cosine similarity of two vectors.

    Args:
        a: Vector of length L
        b: Vector of length L

    Returns:
        CosineResult; value 0 with degenerate=True when either norm is below 1e-12

    Raises:
        ShapeError: If the vectors differ in length
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.dim() != 1 or a.shape != b.shape:
        raise ShapeError(
            f"cosine_sim needs two vectors of equal length, "
            f"got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    sims, degenerate = cosine_matrix(a.unsqueeze(0), b.unsqueeze(0))
    return CosineResult(value=float(sims[0, 0]), degenerate=bool(degenerate[0, 0]))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pairwise cosine similarity between row sets.

    Args:
        a: (..., M, C)
        b: (..., N, C), batch axes broadcastable with a

    Returns:
        (sims, degenerate): sims is (..., M, N) in [-1, 1]; degenerate marks
        pairs where either row has norm below 1e-12 (their similarity is 0)
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"channel mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    norm_a = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    norm_b = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    dead_a = norm_a < DEGENERATE_NORM
    dead_b = norm_b < DEGENERATE_NORM
    unit_a = a / torch.where(dead_a, torch.ones_like(norm_a), norm_a)
    unit_b = b / torch.where(dead_b, torch.ones_like(norm_b), norm_b)
    sims = torch.matmul(unit_a, unit_b.transpose(-1, -2)).clamp(-1.0, 1.0)
    degenerate = dead_a | dead_b.transpose(-1, -2)
    if bool(degenerate.any()):
        logger.debug(f"cosine_matrix: {int(degenerate.sum())} degenerate pair(s) set to 0")
        sims = sims.masked_fill(degenerate, 0.0)
    return ensure_finite(sims, "cosine_matrix"), degenerate


def softmax_axis(x: torch.Tensor, axis: int, temperature: float) -> torch.Tensor:
    """exp(temperature * x) normalized along axis, max-subtracted for stability.

    Raises:
        ValueError: If temperature is not positive
    """
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    scaled = x * temperature
    scaled = scaled - scaled.amax(dim=axis, keepdim=True).detach()
    return ensure_finite(torch.softmax(scaled, dim=axis), "softmax_axis")


def bilinear_resize(
    x: torch.Tensor,
    target: Tuple[int, int],
    channels_last: bool = True,
) -> torch.Tensor:
    """Bilinear interpolation with half-pixel-centre sampling (align_corners=False).

    Args:
        x: (H, W, C) or (B, H, W, C) when channels_last, else (C, H, W) or (B, C, H, W)
        target: (H', W'), both at least 1
        channels_last: Layout of x

    Returns:
        Resized tensor in the same layout; x itself (cloned) when target equals source
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {target}")
    if x.dim() not in (3, 4):
        raise ShapeError(f"bilinear_resize expects a rank 3 or 4 tensor, got rank {x.dim()}")
    unbatched = x.dim() == 3
    batched = x.unsqueeze(0) if unbatched else x
    if channels_last:
        batched = batched.permute(0, 3, 1, 2)
    if tuple(batched.shape[-2:]) == (th, tw):
        return x.clone()
    out = F.interpolate(batched, size=(th, tw), mode="bilinear", align_corners=False)
    if channels_last:
        out = out.permute(0, 2, 3, 1)
    if unbatched:
        out = out.squeeze(0)
    return ensure_finite(out.contiguous(), "bilinear_resize")


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""
    max_relative_error: float
    checked: int
    worst: Optional[Tuple[int, int]] = None
    errors: List[float] = field(default_factory=list)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-6,
    max_coords_per_param: Optional[int] = 16,
    fraction: Optional[float] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of a scalar function with central differences.

    f is re-evaluated with individual coordinates of params shifted by ±h, so it
    must read the current values of params on every call.

    Args:
        f: Zero-argument callable returning a scalar tensor
        params: Leaf tensors with requires_grad=True (float64 expected)
        h: Finite-difference step
        max_coords_per_param: Cap on sampled coordinates per tensor (None = all)
        fraction: If given, sample this fraction of every tensor's coordinates
            (at least one) instead of using max_coords_per_param
        seed: Seed of the coordinate sampler

    Returns:
        GradCheckReport with max |analytic - numeric| / max(1, |analytic|, |numeric|)

    Raises:
        NumericalError: If the loss is not finite
    """
    for p in params:
        if p.dtype != torch.float64:
            logger.warning(f"grad_check on {p.dtype} tensor; oracles assume float64")

    loss = f()
    if loss.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NumericalError(f"grad_check: loss is not finite ({float(loss)})")
    grads: Sequence[Optional[torch.Tensor]]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    else:
        # f does not depend on any tensor that tracks gradients
        grads = (None,) * len(params)
    analytic = [
        torch.zeros_like(p) if g is None else g.detach()
        for p, g in zip(params, grads)
    ]

    rng = np.random.default_rng(seed)
    errors: List[float] = []
    worst: Optional[Tuple[int, int]] = None
    worst_error = 0.0
    for pi, p in enumerate(params):
        n = p.numel()
        if fraction is not None:
            count = max(1, int(round(n * fraction)))
        elif max_coords_per_param is None:
            count = n
        else:
            count = min(n, max_coords_per_param)
        coords = np.arange(n) if count == n else np.sort(rng.choice(n, size=count, replace=False))
        flat = p.data.view(-1)
        grad_flat = analytic[pi].reshape(-1)
        for idx in coords:
            i = int(idx)
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                plus = f()
                flat[i] = original - h
                minus = f()
                flat[i] = original
            if not (bool(torch.isfinite(plus)) and bool(torch.isfinite(minus))):
                raise NumericalError(f"grad_check: non-finite loss at param {pi}, coord {i}")
            numeric = (float(plus) - float(minus)) / (2.0 * h)
            a = float(grad_flat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            errors.append(err)
            if err > worst_error or worst is None:
                worst_error = max(err, worst_error)
                worst = (pi, i)

    report = GradCheckReport(
        max_relative_error=max(errors) if errors else 0.0,
        checked=len(errors),
        worst=worst,
        errors=errors,
    )
    logger.debug(
        f"grad_check: {report.checked} coordinates, "
        f"max relative error {report.max_relative_error:.3e}"
    )
    return report
