"""Correlation volume, guidance-modulated decoding, class logits and the masked BCE loss."""

import logging
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from openvocab_seg.model.config import DecoderConfig
from openvocab_seg.shared.exceptions import ShapeError
from openvocab_seg.shared.numerics import bilinear_resize, cosine_matrix, ensure_finite


logger = logging.getLogger(__name__)

NUM_STAGES = 2


def build_correlation(
    queries: torch.Tensor,
    x_fused: torch.Tensor,
    query_proj: nn.Module,
    feature_proj: nn.Module,
) -> torch.Tensor:
    """F[b, :, t, h, w] = query_proj(q_t) ⊙ feature_proj(X_fused[h, w]).

    Args:
        queries: B×T×D
        x_fused: B×H×W×D
        query_proj: D -> C_dec
        feature_proj: D -> C_dec, bias-free so a zero map stays zero

    Returns:
        B×C_dec×T×H×W
    """
    q = query_proj(queries).transpose(1, 2)[..., None, None]
    x = feature_proj(x_fused).permute(0, 3, 1, 2).unsqueeze(2)
    return q * x


class DecodeStage(nn.Module):
    """2× depthwise transposed-conv upsampling, shared 3×3 conv, FiLM from guidance."""

    def __init__(self, channels: int, guidance_channels: int):
        super().__init__()
        self.upsample = nn.ConvTranspose2d(
            channels, channels, 2, stride=2, groups=channels, bias=False
        )
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Conv2d(guidance_channels, 2 * channels, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Nearest-neighbour upsampling and identity modulation (gamma = 1, delta = 0)."""
        channels = self.conv.out_channels
        with torch.no_grad():
            self.upsample.weight.fill_(1.0)
            self.film.weight.zero_()
            self.film.bias.zero_()
            self.film.bias[:channels] = 1.0

    def modulation(self, guide: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """guide: B×H×W×C_s -> (gamma, delta), each B×C_dec×H×W."""
        gamma, delta = self.film(guide.permute(0, 3, 1, 2)).chunk(2, dim=1)
        return gamma, delta

    def forward(self, volume: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
        """volume: B×C×T×H×W, guide: B×2H×2W×C_s -> B×C×T×2H×2W.

        Raises:
            ShapeError: If guide is not at twice the volume's resolution
        """
        b, c, t, h, w = volume.shape
        if tuple(guide.shape[1:3]) != (2 * h, 2 * w):
            raise ShapeError(
                f"guidance extents {tuple(guide.shape[1:3])} must be 2x "
                f"the correlation grid ({h}, {w})"
            )
        planes = volume.transpose(1, 2).reshape(b * t, c, h, w)
        out = self.conv(self.upsample(planes)).reshape(b, t, c, 2 * h, 2 * w)
        gamma, delta = self.modulation(guide)
        out = gamma.unsqueeze(1) * out + delta.unsqueeze(1)
        return out.transpose(1, 2).contiguous()


def decode_stage(volume: torch.Tensor, guide: torch.Tensor, stage: DecodeStage) -> torch.Tensor:
    return stage(volume, guide)


def project_logits(
    volume: torch.Tensor,
    g_hat: torch.Tensor,
    embed: nn.Module,
    temperature: torch.Tensor,
) -> torch.Tensor:
    """logit[n, h, w] = tau_out * cosine(embed(mean_t volume[:, t, h, w]), g_hat[n]).

    Args:
        volume: B×C_dec×T×H×W
        g_hat: B×N×D (or N×D) class guidance
        embed: C_dec -> D pixel embedding
        temperature: Scalar tau_out

    Returns:
        B×N×H×W
    """
    b, _, _, h, w = volume.shape
    pixels = embed(volume.mean(dim=2).permute(0, 2, 3, 1)).reshape(b, h * w, -1)
    sims, _ = cosine_matrix(pixels, g_hat)
    return (temperature * sims).transpose(1, 2).reshape(b, -1, h, w)


def final_resize(
    logits: torch.Tensor,
    height: int,
    width: int,
    valid: Optional[Tuple[int, int]] = None,
) -> torch.Tensor:
    """Crop to the valid (H, W) extent, then bilinear-resize B×N×H×W to (height, width)."""
    if valid is not None:
        logits = logits[..., : valid[0], : valid[1]]
    return bilinear_resize(logits, (height, width), channels_last=False)


def bce_loss(logits: torch.Tensor, Y: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Masked multi-label BCE, summed over classes and normalized by the valid pixel count.

    Args:
        logits: B×N×H0×W0
        Y: B×N×H0×W0 targets in {0, 1}
        M: B×H0×W0 mask in {0, 1}

    Returns:
        Scalar loss; 0 (with a warning) when the mask is empty
    """
    if logits.shape != Y.shape or logits.shape[:1] + logits.shape[2:] != M.shape:
        raise ShapeError(
            f"bce_loss shapes disagree: logits {tuple(logits.shape)}, "
            f"Y {tuple(Y.shape)}, M {tuple(M.shape)}"
        )
    M = M.to(logits.dtype)
    valid = M.sum()
    if float(valid) == 0.0:
        logger.warning("bce_loss: mask selects no pixels, returning 0")
        return (logits * 0.0).sum()
    per_class = F.binary_cross_entropy_with_logits(logits, Y.to(logits.dtype), reduction="none")
    per_pixel = per_class.sum(dim=1)
    return ensure_finite((per_pixel * M).sum() / valid, "bce_loss")


class GuidedDecoder(nn.Module):
    """Correlation -> decode stage (S_1) -> GELU -> decode stage (S_2) -> cosine class logits."""

    def __init__(self, dim: int, guidance_channels: int, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.query_proj = nn.Linear(dim, config.channels)
        self.feature_proj = nn.Linear(dim, config.channels, bias=False)
        self.stages = nn.ModuleList(
            [DecodeStage(config.channels, guidance_channels) for _ in range(NUM_STAGES)]
        )
        self.embed = nn.Linear(config.channels, dim)
        self.logit_temperature = nn.Parameter(torch.tensor(float(config.logit_temperature)))

    def forward(
        self,
        queries: torch.Tensor,
        x_fused: torch.Tensor,
        guides: Sequence[torch.Tensor],
        g_hat: torch.Tensor,
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Returns (logits B×N×4H×4W, per-stage volumes)."""
        volume = build_correlation(queries, x_fused, self.query_proj, self.feature_proj)
        stages = []
        for index, (stage, guide) in enumerate(zip(self.stages, guides)):
            volume = decode_stage(F.gelu(volume) if index else volume, guide, stage)
            stages.append(volume)
        logits = project_logits(volume, g_hat, self.embed, self.logit_temperature)
        return logits, stages
