"""Contextual cross-modal fusion.

Each block mixes mid-layer visual features with the guidance tensor G through
row/column self-attention (local branch) and a four-direction linear state-space
scan over G (global branch), projects both to D, adapts channels, and lets the
learnable queries read the fused map plus the pooled text tokens through linear
attention. All spatial tensors are channels-last: B×H×W×C.
"""

import logging
import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from openvocab_seg.model.config import FusionConfig
from openvocab_seg.shared.exceptions import ShapeError
from openvocab_seg.shared.numerics import ensure_finite


logger = logging.getLogger(__name__)

NUM_SCAN_DIRECTIONS = 4


def split_halves(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Contiguous channel halves: first half horizontal, second half vertical."""
    c = x.shape[-1]
    if c % 2:
        raise ShapeError(f"cannot split {c} channels into equal halves")
    return x[..., : c // 2], x[..., c // 2:]


def multihead_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int
) -> torch.Tensor:
    """Dense softmax attention over the second-to-last axis; q, k, v are (S)×L×E."""
    *lead, length, dim = q.shape
    if dim % heads:
        raise ShapeError(f"width {dim} is not divisible by {heads} heads")
    dh = dim // heads

    def heads_first(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*lead, x.shape[-2], heads, dh).transpose(-2, -3)

    qh, kh, vh = heads_first(q), heads_first(k), heads_first(v)
    scores = torch.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(dh)
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, vh).transpose(-2, -3)
    return out.reshape(*lead, length, dim)


class AxialAttention(nn.Module):
    """Multi-head self-attention over sequences of tokens (one row or one column each)."""

    def __init__(self, in_dim: int, out_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(in_dim, out_dim)
        self.k_proj = nn.Linear(in_dim, out_dim)
        self.v_proj = nn.Linear(in_dim, out_dim)
        self.out_proj = nn.Linear(out_dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, v = self.q_proj(tokens), self.k_proj(tokens), self.v_proj(tokens)
        attended = multihead_attention(q, k, v, self.heads)
        return self.out_proj(attended)


class DirectionalAttention(nn.Module):
    """Rectangular self-attention: full rows on [F_h ∥ G_h], full columns on [F_v ∥ G_v]."""

    def __init__(self, feature_dim: int, guidance_dim: int, heads: int):
        super().__init__()
        if feature_dim % 2 or guidance_dim % 2:
            raise ShapeError(
                f"channel widths must be even, got C = {feature_dim}, D = {guidance_dim}"
            )
        branch_in = feature_dim // 2 + guidance_dim // 2
        self.horizontal = AxialAttention(branch_in, guidance_dim // 2, heads)
        self.vertical = AxialAttention(branch_in, guidance_dim // 2, heads)

    def forward(self, features: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
        """features: B×H×W×C, G: B×H×W×D -> X_local: B×H×W×D."""
        f_h, f_v = split_halves(features)
        g_h, g_v = split_halves(G)
        rows = self.horizontal(torch.cat([f_h, g_h], dim=-1))
        cols = self.vertical(torch.cat([f_v, g_v], dim=-1).transpose(1, 2)).transpose(1, 2)
        return torch.cat([rows, cols], dim=-1)


def directional_scan(
    x: torch.Tensor,
    A_bar: torch.Tensor,
    B_bar: torch.Tensor,
    C_out: torch.Tensor,
) -> torch.Tensor:
    """Diagonal linear recurrence h_t = A h_{t-1} + B x_t, y_t = <C, h_t>, h_0 = 0, per channel.

    Unrolled into a causal depthwise convolution with kernel k_j = sum_s C B A^j.

    Args:
        x: B×L×D sequences
        A_bar: D×S decays, |A| < 1
        B_bar: D×S input gains
        C_out: D×S readouts

    Returns:
        B×L×D outputs
    """
    b, length, d = x.shape
    ones = torch.ones_like(A_bar).unsqueeze(-1)
    if length > 1:
        decays = torch.cumprod(A_bar.unsqueeze(-1).expand(*A_bar.shape, length - 1), dim=-1)
        powers = torch.cat([ones, decays], dim=-1)
    else:
        powers = ones
    kernel = ((C_out * B_bar).unsqueeze(-1) * powers).sum(dim=1)
    weight = kernel.flip(-1).unsqueeze(1)
    seq = F.pad(x.transpose(1, 2), (length - 1, 0))
    return F.conv1d(seq, weight, groups=d).transpose(1, 2)


class StateSpaceScan2D(nn.Module):
    """Four-direction scan parameters; index 0/1 scan rows forward/backward, 2/3 columns."""

    def __init__(self, channels: int, state_dim: int):
        super().__init__()
        shape = (NUM_SCAN_DIRECTIONS, channels, state_dim)
        self.decay_raw = nn.Parameter(torch.zeros(shape))
        self.input_gain = nn.Parameter(torch.zeros(shape))
        self.readout = nn.Parameter(torch.zeros(shape))
        self.reset_parameters()

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Decays spread over [0.5, 0.95] per state, unit input gains, fan-in uniform readouts."""
        state_dim = self.decay_raw.shape[-1]
        with torch.no_grad():
            decays = torch.linspace(0.5, 0.95, state_dim, dtype=self.decay_raw.dtype)
            self.decay_raw.copy_(torch.atanh(decays).expand_as(self.decay_raw))
            self.input_gain.fill_(1.0)
            bound = 1.0 / math.sqrt(state_dim)
            self.readout.uniform_(-bound, bound, generator=generator)

    @property
    def A_bar(self) -> torch.Tensor:
        return torch.tanh(self.decay_raw)

    def forward(self, G: torch.Tensor) -> torch.Tensor:
        return ss2d_context(G, self.A_bar, self.input_gain, self.readout)


def ss2d_context(
    G: torch.Tensor,
    A_bar: torch.Tensor,
    B_bar: torch.Tensor,
    C_out: torch.Tensor,
) -> torch.Tensor:
    """Cross-scan G in four orders, run the recurrence, merge back and average.

    Args:
        G: B×H×W×D
        A_bar, B_bar, C_out: 4×D×S, one parameter set per scan order
            (row-major, reverse row-major, column-major, reverse column-major)

    Returns:
        Y_global: B×H×W×D
    """
    b, h, w, d = G.shape
    row_major = G.reshape(b, h * w, d)
    col_major = G.transpose(1, 2).reshape(b, w * h, d)

    def scan(seq: torch.Tensor, i: int, reverse: bool) -> torch.Tensor:
        if reverse:
            return directional_scan(seq.flip(1), A_bar[i], B_bar[i], C_out[i]).flip(1)
        return directional_scan(seq, A_bar[i], B_bar[i], C_out[i])

    y_rows = scan(row_major, 0, False) + scan(row_major, 1, True)
    y_cols = scan(col_major, 2, False) + scan(col_major, 3, True)
    y = y_rows.reshape(b, h, w, d) + y_cols.reshape(b, w, h, d).transpose(1, 2)
    return y / NUM_SCAN_DIRECTIONS


def fuse_local_global(
    x_local: torch.Tensor, y_global: torch.Tensor, proj: nn.Linear
) -> torch.Tensor:
    """X_fused = F_proj [X_local ∥ Y_global], per pixel."""
    return proj(torch.cat([x_local, y_global], dim=-1))


class ChannelAdapt(nn.Module):
    """Pointwise, 3×3 depthwise, GLU and pointwise sub-blocks, each as LayerNorm(x + sub(x))."""

    def __init__(self, dim: int):
        super().__init__()
        self.pw_in = nn.Linear(dim, dim)
        self.depthwise = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.glu_in = nn.Linear(dim, 2 * dim)
        self.pw_out = nn.Linear(dim, dim)
        self.norms = nn.ModuleList([nn.LayerNorm(dim) for _ in range(4)])

    def glu(self, x: torch.Tensor) -> torch.Tensor:
        value, gate = self.glu_in(x).chunk(2, dim=-1)
        return value * torch.sigmoid(gate)

    def _depthwise(self, x: torch.Tensor) -> torch.Tensor:
        return self.depthwise(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for norm, sub in zip(self.norms, (self.pw_in, self._depthwise, self.glu, self.pw_out)):
            x = norm(x + sub(x))
        return x


def channel_adapt(x: torch.Tensor, module: ChannelAdapt) -> torch.Tensor:
    return module(x)


def kernel_feature_map(x: torch.Tensor) -> torch.Tensor:
    """phi(x) = elu(x) + 1 > 0."""
    return F.elu(x) + 1.0


def linear_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1
) -> torch.Tensor:
    """Kernelized attention.

    out_t = phi(q_t)^T (sum_j phi(k_j) v_j^T) / (phi(q_t)^T sum_j phi(k_j))

    Args:
        q: B×T×E queries
        k: B×L×E keys
        v: B×L×E values
        heads: Heads splitting E

    Returns:
        B×T×E
    """
    b, t, e = q.shape
    if e % heads:
        raise ShapeError(f"width {e} is not divisible by {heads} heads")
    dh = e // heads
    phi_q = kernel_feature_map(q).reshape(b, t, heads, dh).transpose(1, 2)
    phi_k = kernel_feature_map(k).reshape(b, -1, heads, dh).transpose(1, 2)
    vh = v.reshape(b, -1, heads, dh).transpose(1, 2)
    kv = torch.matmul(phi_k.transpose(-1, -2), vh)
    normalizer = torch.matmul(phi_q, phi_k.sum(dim=-2).unsqueeze(-1))
    out = torch.matmul(phi_q, kv) / normalizer
    return out.transpose(1, 2).reshape(b, t, e)


class LanguageQueryAttention(nn.Module):
    """Queries linearly attend to [flatten(X_fused) ∥ E_text]; gated update, residual MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.gate = nn.Linear(2 * dim, 1)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(
        self, queries: torch.Tensor, x_fused: torch.Tensor, e_text: torch.Tensor
    ) -> torch.Tensor:
        """queries: B×T×D, x_fused: B×H×W×D, e_text: N×D or B×N×D -> B×T×D."""
        b = queries.shape[0]
        if e_text.dim() == 2:
            e_text = e_text.unsqueeze(0).expand(b, -1, -1)
        memory = torch.cat([x_fused.reshape(b, -1, x_fused.shape[-1]), e_text], dim=1)
        q, k, v = self.q_proj(queries), self.k_proj(memory), self.v_proj(memory)
        out = linear_attention(q, k, v, self.heads)
        g = torch.sigmoid(self.gate(torch.cat([queries, out], dim=-1)))
        blended = g * out + (1.0 - g) * queries
        return blended + self.mlp(blended)


def language_query_attention(
    queries: torch.Tensor,
    x_fused: torch.Tensor,
    e_text: torch.Tensor,
    module: LanguageQueryAttention,
) -> torch.Tensor:
    return module(queries, x_fused, e_text)


class FusionBlock(nn.Module):
    """One local/global fusion step with query update.

    Blocks after the first take the previous X_fused, projected back to the
    feature width, in place of F_mid.
    """

    def __init__(self, feature_dim: int, config: FusionConfig, dim: int, first: bool):
        super().__init__()
        self.config = config
        self.carry_proj = None if first else nn.Linear(dim, feature_dim)
        if config.use_directional_attention:
            self.local = DirectionalAttention(feature_dim, dim, config.heads)
        else:
            self.local_proj = nn.Linear(feature_dim + dim, dim)
        self.scan = StateSpaceScan2D(dim, config.state_dim) if config.use_global_context else None
        self.fuse_proj = nn.Linear(2 * dim, dim)
        self.adapt = ChannelAdapt(dim)
        self.query_attn = None
        if config.use_language_query:
            self.query_attn = LanguageQueryAttention(dim, config.heads, config.mlp_ratio)

    def forward(
        self,
        features: torch.Tensor,
        G: torch.Tensor,
        e_text: torch.Tensor,
        queries: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.carry_proj is not None:
            features = self.carry_proj(features)
        if self.config.use_directional_attention:
            x_local = self.local(features, G)
        else:
            x_local = self.local_proj(torch.cat([features, G], dim=-1))
        y_global = self.scan(G) if self.scan is not None else torch.zeros_like(G)
        x_fused = self.adapt(fuse_local_global(x_local, y_global, self.fuse_proj))
        if self.query_attn is not None:
            queries = self.query_attn(queries, x_fused, e_text)
        return ensure_finite(x_fused, "fusion_block"), queries


class ContextualFusion(nn.Module):
    """Stack of fusion blocks; the queries are threaded through every block."""

    def __init__(self, feature_dim: int, dim: int, config: FusionConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList([
            FusionBlock(feature_dim, config, dim, first=(i == 0)) for i in range(config.depth)
        ])

    def operations(self) -> List[str]:
        """Names of the fusion operations one forward executes, in order."""
        per_block = []
        if self.config.use_directional_attention:
            per_block.append("directional_attention")
        if self.config.use_global_context:
            per_block.append("ss2d_context")
        per_block += ["fuse_local_global", "channel_adapt"]
        if self.config.use_language_query:
            per_block.append("language_query_attention")
        return per_block * len(self.blocks)

    def forward(
        self,
        F_mid: torch.Tensor,
        G: torch.Tensor,
        e_text: torch.Tensor,
        queries: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """F_mid: B×H×W×C, G: B×H×W×D, e_text: N×D, queries: B×T×D.

        Returns:
            (X_fused, queries)
        """
        features = F_mid
        for block in self.blocks:
            features, queries = block(features, G, e_text, queries)
        return features, queries
