"""Prior-guided regional alignment.

Object prior -> prior-weighted prompt centres -> region similarity and weights
-> visual prototypes -> textual and visual region guidance -> norm-gated
guidance tensor G, constant within each region.

All functions take a leading batch axis; the text bank (N×P×C, N×C) is shared
across the batch.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from openvocab_seg.model.config import AlignConfig
from openvocab_seg.shared.exceptions import ShapeError
from openvocab_seg.shared.models import AlignmentState, RegionGrid
from openvocab_seg.shared.numerics import cosine_matrix, ensure_finite, softmax_axis


logger = logging.getLogger(__name__)

# Floor on the prior inside the prompt weight, so absent categories keep a positive weight
PRIOR_FLOOR = 1e-4

Scalar = Union[float, torch.Tensor]


def object_prior(V: torch.Tensor, T_bar: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of cosine(V[:, i, j], T_bar[n]).

    Args:
        V: B×C×H×W (or C×H×W)
        T_bar: N×C

    Returns:
        B×N (or N) priors in [-1, 1]
    """
    unbatched = V.dim() == 3
    if unbatched:
        V = V.unsqueeze(0)
    if V.shape[1] != T_bar.shape[-1]:
        raise ShapeError(f"V has {V.shape[1]} channels but T_bar has {T_bar.shape[-1]}")
    pixels = V.flatten(2).transpose(1, 2)
    sims, _ = cosine_matrix(pixels, T_bar)
    prior = sims.mean(dim=1)
    return prior.squeeze(0) if unbatched else prior


def weighted_prompt_center(T: torch.Tensor, p_prior: torch.Tensor, lam: Scalar) -> torch.Tensor:
    """T_hat_n = (1/P) * sum_p u_n * T[n, p] with u_n = (1 - lam) + lam * max(p_n, 1e-4).

    Args:
        T: N×P×C prompt embeddings
        p_prior: N or B×N
        lam: Blend weight in [0, 1] (float or 0-dim tensor)

    Returns:
        N×C or B×N×C, matching p_prior's batching
    """
    if isinstance(lam, (int, float)) and not 0.0 <= lam <= 1.0:
        raise ValueError(f"prior weight lambda must lie in [0, 1], got {lam}")
    u = (1.0 - lam) + lam * p_prior.clamp(min=PRIOR_FLOOR)
    return u.unsqueeze(-1) * T.mean(dim=-2)


def region_bounds(extent: int, r: int) -> list:
    """r+1 offsets of a balanced split; larger parts come first (16 into 6 -> 3,3,3,3,2,2)."""
    sizes = [len(part) for part in np.array_split(np.arange(extent), r)]
    return [0] + np.cumsum(sizes).tolist()


def build_region_grid(height: int, width: int, r: int) -> RegionGrid:
    """r×r rectangular partition of an H×W grid.

    Raises:
        ShapeError: If r > min(H, W)
        ValueError: If r < 1
    """
    if r < 1:
        raise ValueError(f"region grid side must be at least 1, got {r}")
    if r > min(height, width):
        raise ShapeError(
            f"region_partition requires r <= min(H, W): r = {r}, feature grid {height}×{width}"
        )
    rows = region_bounds(height, r)
    cols = region_bounds(width, r)
    row_id = torch.repeat_interleave(torch.arange(r), torch.tensor(np.diff(rows)))
    col_id = torch.repeat_interleave(torch.arange(r), torch.tensor(np.diff(cols)))
    index_map = row_id.unsqueeze(1) * r + col_id.unsqueeze(0)
    return RegionGrid(r=r, row_bounds=rows, col_bounds=cols, index_map=index_map)


def region_partition(V: torch.Tensor, r: int) -> Tuple[RegionGrid, torch.Tensor]:
    """Partition into r×r regions and mean-pool V inside each.

    Args:
        V: B×C×H×W (or C×H×W)
        r: Grid side

    Returns:
        (regions, v) with v B×K×C (or K×C), K = r*r in row-major grid order
    """
    unbatched = V.dim() == 3
    if unbatched:
        V = V.unsqueeze(0)
    _, c, h, w = V.shape
    regions = build_region_grid(h, w, r)
    pixels = V.flatten(2).transpose(1, 2)
    index = regions.index_map.reshape(-1)
    sums = pixels.new_zeros(pixels.shape[0], regions.num_regions, c).index_add(1, index, pixels)
    sizes = torch.bincount(index, minlength=regions.num_regions).to(V.dtype)
    v = sums / sizes.unsqueeze(-1)
    return regions, (v.squeeze(0) if unbatched else v)


def region_similarity(v: torch.Tensor, T_hat: torch.Tensor) -> torch.Tensor:
    """A[k, n] = cosine(v_k, T_hat_n); (B×)K×N."""
    sims, _ = cosine_matrix(v, T_hat)
    return sims


def region_weights(A: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax over regions of tau * A; every category column sums to 1.

    Raises:
        ValueError: If tau is not positive
    """
    return softmax_axis(A, axis=-2, temperature=tau)


def visual_prototypes(w: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """m_n = sum_k w[k, n] * v_k; (B×)N×C."""
    return torch.matmul(w.transpose(-1, -2), v)


def textual_guidance(m: torch.Tensor, T_hat: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    """g_region[n] = W_t [m_n ∥ T_hat_n] + b_t."""
    return proj(torch.cat([m, T_hat.expand_as(m)], dim=-1))


def region_membership(regions: RegionGrid) -> torch.Tensor:
    """K×HW boolean mask of region membership."""
    index = regions.index_map.reshape(-1)
    return index.unsqueeze(0) == torch.arange(regions.num_regions).unsqueeze(1)


def visual_guidance(
    V: torch.Tensor,
    regions: RegionGrid,
    scorer: nn.Module,
    proj: Optional[nn.Module] = None,
) -> torch.Tensor:
    """Attention-pool member tokens of each region, then project to D.

    Args:
        V: B×C×H×W
        regions: Partition of V's grid
        scorer: Maps B×HW×C tokens to B×HW×1 logits
        proj: Optional C -> D projection

    Returns:
        B×K×D (B×K×C without proj)
    """
    tokens = V.flatten(2).transpose(1, 2)
    logits = scorer(tokens).squeeze(-1)
    member = region_membership(regions).to(V.device)
    scores = logits.unsqueeze(1).expand(-1, regions.num_regions, -1)
    scores = scores.masked_fill(~member, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    pooled = torch.matmul(weights, tokens)
    return proj(pooled) if proj is not None else pooled


def guidance_gate(
    g_image: torch.Tensor, g_text: torch.Tensor, norm_clamp: float = 50.0
) -> torch.Tensor:
    """alpha = e^|g_image| / (e^|g_image| + e^|g_text|) on clamped norms, strictly inside (0, 1)."""
    n_img = torch.linalg.vector_norm(g_image, dim=-1).clamp(max=norm_clamp)
    n_txt = torch.linalg.vector_norm(g_text, dim=-1).clamp(max=norm_clamp)
    alpha = torch.sigmoid(n_img - n_txt)
    eps = torch.finfo(alpha.dtype).eps
    saturated = (alpha <= eps) | (alpha >= 1.0 - eps)
    if bool(saturated.any()):
        logger.debug(f"guidance gate saturated in {int(saturated.sum())} region(s)")
    return alpha.clamp(eps, 1.0 - eps)


def integrate_guidance(
    g_image: torch.Tensor,
    g_region: torch.Tensor,
    A: torch.Tensor,
    beta: float,
    gate_proj: nn.Module,
    regions: RegionGrid,
    norm_clamp: float = 50.0,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Blend visual and textual region guidance and broadcast over each region.

    Args:
        g_image: B×K×D
        g_region: B×N×D
        A: B×K×N region-category similarity
        beta: Category softmax temperature
        gate_proj: W_g, D -> D
        regions: Partition supplying the broadcast map

    Returns:
        (G, alpha, g_text): B×H×W×D, B×K, B×K×D
    """
    s = softmax_axis(A, axis=-1, temperature=beta)
    g_text = gate_proj(torch.matmul(s, g_region))
    alpha = guidance_gate(g_image, g_text, norm_clamp).unsqueeze(-1)
    g_k = alpha * g_image + (1.0 - alpha) * g_text
    G = g_k[:, regions.index_map]
    return ensure_finite(G, "integrate_guidance"), alpha.squeeze(-1), g_text


class PriorGuidedAlignment(nn.Module):
    """Trainable parameters and forward composition of the alignment stage."""

    def __init__(self, channels: int, config: AlignConfig):
        super().__init__()
        self.config = config
        d = config.guidance_dim
        self.text_proj = nn.Linear(2 * channels, d)
        self.gate_proj = nn.Linear(d, d, bias=False)
        self.scorer = nn.Sequential(
            nn.Linear(channels, config.mlp_hidden),
            nn.GELU(),
            nn.Linear(config.mlp_hidden, 1),
        )
        self.visual_proj = nn.Linear(channels, d)
        if config.adaptive_prior:
            self.prior_logit = nn.Parameter(torch.zeros(()))
        else:
            self.register_parameter("prior_logit", None)

    @property
    def prior_weight(self) -> Scalar:
        if self.prior_logit is not None:
            return torch.sigmoid(self.prior_logit)
        return self.config.prior_lambda

    def forward(self, V: torch.Tensor, T: torch.Tensor, use_prior: bool = True) -> AlignmentState:
        """Run the full alignment for a batch.

        Args:
            V: B×C×H×W
            T: N×P×C prompt embeddings
            use_prior: When False, T_hat is the plain prompt mean and p_prior is not computed
        """
        cfg = self.config
        b = V.shape[0]
        T_bar = T.mean(dim=1)
        if use_prior:
            p_prior = object_prior(V, T_bar)
            T_hat = weighted_prompt_center(T, p_prior, self.prior_weight)
        else:
            p_prior = V.new_zeros(b, T.shape[0])
            T_hat = T_bar.unsqueeze(0).expand(b, -1, -1)
        regions, v = region_partition(V, cfg.region_grid)
        A = region_similarity(v, T_hat)
        w = region_weights(A, cfg.region_temperature)
        m = visual_prototypes(w, v)
        g_region = textual_guidance(m, T_hat, self.text_proj)
        g_image = visual_guidance(V, regions, self.scorer, self.visual_proj)
        G, alpha, g_text = integrate_guidance(
            g_image, g_region, A, cfg.category_temperature, self.gate_proj, regions, cfg.norm_clamp
        )
        return AlignmentState(
            regions=regions, p_prior=p_prior, T_hat=T_hat, v=v, A=A, w=w, m=m,
            g_region=g_region, g_image=g_image, g_text=g_text, alpha=alpha, G=G,
        )
