"""Deterministic stub encoders standing in for a frozen vision-language backbone.

Image and text encoders share one seeded orthonormal basis. A category's text
vector is the basis applied to a seeded unit code keyed by the category name,
and the scene generator paints that same code as a pixel texture, so a patch
covered by category n projects onto the direction of n's text embedding.
"""

import functools
import hashlib
import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from openvocab_seg.model.config import EncoderConfig
from openvocab_seg.shared.exceptions import ShapeError
from openvocab_seg.shared.models import EncodedImage, TextBank, VocabularySpec


logger = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def keyed_rng(*parts: object) -> np.random.Generator:
    """Generator seeded from a stable digest of parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def patch_dim(patch_size: int) -> int:
    return 3 * patch_size * patch_size


def category_code(category: str, seed: int, dim: int) -> np.ndarray:
    """Seeded unit vector keyed by the category string."""
    z = keyed_rng("category", seed, category).standard_normal(dim)
    return z / np.linalg.norm(z)


def category_texture(category: str, seed: int, patch_size: int) -> np.ndarray:
    """The category code laid out as a patch_size×patch_size×3 tile (row, column, channel)."""
    return category_code(category, seed, patch_dim(patch_size)).reshape(patch_size, patch_size, 3)


@functools.lru_cache(maxsize=32)
def _basis(seed: int, channels: int, dim: int) -> np.ndarray:
    rng = keyed_rng("basis", seed, channels, dim)
    if channels >= dim:
        q, _ = np.linalg.qr(rng.standard_normal((channels, dim)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((dim, channels)))
    return q.T


def backbone_basis(seed: int, channels: int, patch_size: int) -> np.ndarray:
    """C × 3p² projection shared by both encoders (orthonormal columns when C ≥ 3p²)."""
    return _basis(seed, channels, patch_dim(patch_size)).copy()


def sinusoidal_positions(
    height: int, width: int, channels: int, dtype: torch.dtype
) -> torch.Tensor:
    """2D sine/cosine codes, H×W×C; first half encodes rows, second half columns."""
    half = channels // 2
    out = torch.zeros(height, width, channels, dtype=torch.float64)
    for axis, extent, offset, size in ((0, height, 0, half), (1, width, half, channels - half)):
        pos = torch.arange(extent, dtype=torch.float64).unsqueeze(1)
        steps = torch.arange(0, size, 2, dtype=torch.float64)
        freq = torch.exp(-math.log(10000.0) * steps / max(size, 1))
        codes = torch.zeros(extent, size, dtype=torch.float64)
        codes[:, 0::2] = torch.sin(pos * freq)
        codes[:, 1::2] = torch.cos(pos * freq)[:, : size // 2]
        if axis == 0:
            out[:, :, offset:offset + size] = codes.unsqueeze(1)
        else:
            out[:, :, offset:offset + size] = codes.unsqueeze(0)
    return out.to(dtype)


class StubImageEncoder(nn.Module):
    """Patch projection, position codes and two fixed mixing layers.

    V is the output of the channel mixing layer, F_mid is tapped after the
    spatial mixing layer, and S_1 / S_2 are shallow projections of 3×3 pixel
    neighbourhoods at 2× and 4× the feature resolution.
    """

    POSITION_SCALE = 0.05
    SPATIAL_MIX = 0.25
    CHANNEL_MIX = 0.1

    def __init__(self, config: EncoderConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.seed = config.seed if seed is None else seed
        c, cs = config.channels, config.guidance_channels
        rng = keyed_rng("image-encoder", self.seed, c, cs, config.patch_size)
        weights = {
            "basis": backbone_basis(self.seed, c, config.patch_size),
            "channel_mix": rng.standard_normal((c, c)) / math.sqrt(c),
            "guide_proj_1": rng.standard_normal((cs, 27)) / math.sqrt(27.0),
            "guide_proj_2": rng.standard_normal((cs, 27)) / math.sqrt(27.0),
        }
        for name, value in weights.items():
            tensor = torch.from_numpy(value)
            if config.trainable:
                self.register_parameter(name, nn.Parameter(tensor))
            else:
                self.register_buffer(name, tensor)

    def forward(self, images: torch.Tensor) -> EncodedImage:
        """Encode a batch.

        Args:
            images: B×H0×W0×3 pixels in [0, 1]

        Raises:
            ShapeError: If H0 or W0 is not divisible by the patch size
        """
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected B×H0×W0×3 images, got {tuple(images.shape)}")
        p = self.config.patch_size
        b, h0, w0, _ = images.shape
        if h0 % p or w0 % p:
            raise ShapeError(f"image extents ({h0}, {w0}) are not divisible by patch size {p}")
        h, w = h0 // p, w0 // p
        dtype = self.basis.dtype
        x = (images.to(dtype) - PIXEL_MEAN) / PIXEL_STD

        patches = x.reshape(b, h, p, w, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, p * p * 3)
        tokens = patches @ self.basis.T
        tokens = tokens + self.POSITION_SCALE * sinusoidal_positions(h, w, tokens.shape[-1], dtype)

        chw = tokens.permute(0, 3, 1, 2)
        pooled = F.avg_pool2d(chw, 3, stride=1, padding=1, count_include_pad=False)
        mid = chw + self.SPATIAL_MIX * (pooled - chw)
        f_mid = mid.permute(0, 2, 3, 1).contiguous()

        v = f_mid + self.CHANNEL_MIX * torch.tanh(f_mid @ self.channel_mix.T)
        v = v.permute(0, 3, 1, 2).contiguous()

        pixels = x.permute(0, 3, 1, 2)
        s_1 = self._guidance(pixels, (2 * h, 2 * w), self.guide_proj_1)
        s_2 = self._guidance(pixels, (4 * h, 4 * w), self.guide_proj_2)
        return EncodedImage(V=v, F_mid=f_mid, S_1=s_1, S_2=s_2)

    @staticmethod
    def _guidance(pixels: torch.Tensor, size, proj: torch.Tensor) -> torch.Tensor:
        level = F.adaptive_avg_pool2d(pixels, size)
        b = level.shape[0]
        patches = F.unfold(level, 3, padding=1).transpose(1, 2).reshape(b, size[0], size[1], -1)
        return torch.tanh(patches @ proj.T).contiguous()


class StubTextEncoder:
    """Frozen text stub: one seeded unit vector per (category, template)."""

    PROMPT_JITTER = 0.15

    def __init__(self, config: EncoderConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self._basis = backbone_basis(self.seed, config.channels, config.patch_size)

    def prompt_vector(self, category: str, template_index: int) -> np.ndarray:
        dim = self._basis.shape[1]
        z = category_code(category, self.seed, dim)
        rng = keyed_rng("prompt", self.seed, category, template_index)
        jitter = rng.standard_normal(dim) / math.sqrt(dim)
        t = self._basis @ (z + self.PROMPT_JITTER * jitter)
        return t / np.linalg.norm(t)

    def encode(self, vocab: VocabularySpec, dtype: torch.dtype = torch.float64) -> TextBank:
        if len(set(vocab.categories)) != len(vocab.categories):
            raise ValueError("Vocabulary contains duplicate category names")
        rows = np.stack([
            np.stack([self.prompt_vector(name, p) for p in range(vocab.num_prompts)])
            for name in vocab.categories
        ])
        t = torch.from_numpy(rows).to(dtype)
        return TextBank(categories=list(vocab.categories), T=t, T_bar=t.mean(dim=1))


@functools.lru_cache(maxsize=8)
def _frozen_image_encoder(seed: int, config_json: str, dtype: torch.dtype) -> StubImageEncoder:
    config = EncoderConfig.model_validate_json(config_json).model_copy(update={"trainable": False})
    return StubImageEncoder(config, seed=seed).to(dtype).eval()


def stub_encode_image(
    image: Union[np.ndarray, torch.Tensor],
    seed: int,
    config: Optional[EncoderConfig] = None,
    dtype: torch.dtype = torch.float64,
) -> EncodedImage:
    """Encode one image (H0×W0×3) or a batch (B×H0×W0×3) with the frozen stub.

    Raises:
        ShapeError: If the image extents are not divisible by the patch size
    """
    config = config or EncoderConfig()
    images = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if images.dim() == 3:
        images = images.unsqueeze(0)
    encoder = _frozen_image_encoder(seed, config.model_dump_json(), dtype)
    with torch.no_grad():
        return encoder(images.to(dtype))


def stub_encode_text(
    vocab: VocabularySpec,
    seed: int,
    config: Optional[EncoderConfig] = None,
    dtype: torch.dtype = torch.float64,
) -> TextBank:
    """Prompt embeddings for a vocabulary; rows are unit-norm, T_bar is the prompt mean.

    Raises:
        ValueError: On duplicate category names
    """
    return StubTextEncoder(config or EncoderConfig(), seed=seed).encode(vocab, dtype=dtype)


def load_vocabulary(path: Union[str, Path]) -> List[str]:
    """Read line-delimited UTF-8 category names (blank lines and # comments skipped).

    Raises:
        ValueError: On duplicates or an empty file
    """
    names: List[str] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        name = line.strip()
        if not name or name.startswith("#"):
            continue
        if name in names:
            raise ValueError(f"Duplicate category name in {path}: {name!r}")
        names.append(name)
    if not names:
        raise ValueError(f"Vocabulary file {path} lists no categories")
    return names


def save_vocabulary(path: Union[str, Path], names: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{name}\n" for name in names), encoding="utf-8")
