"""Core data models for the open-vocabulary segmentation stack."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from openvocab_seg.shared.exceptions import ShapeError


DEFAULT_PROMPT_TEMPLATE = "A photo of a {category} in the scene."
CATEGORY_PLACEHOLDER = "{category}"


class Precision(Enum):
    """Floating point precision of a run."""
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> torch.dtype:
        """Torch dtype for this precision."""
        return torch.float32 if self is Precision.F32 else torch.float64


class ShapeKind(Enum):
    """Primitive shapes painted by the scene generator."""
    RECTANGLE = "RECTANGLE"
    ELLIPSE = "ELLIPSE"


@dataclass(frozen=True)
class CosineResult:
    """Cosine similarity with its degeneracy flag."""
    value: float
    degenerate: bool = False


@dataclass
class VocabularySpec:
    """Category names and prompt templates for one run."""
    categories: List[str]
    templates: List[str] = field(default_factory=lambda: [DEFAULT_PROMPT_TEMPLATE])

    def __post_init__(self) -> None:
        if not self.categories:
            raise ValueError("Vocabulary must contain at least one category")
        if not self.templates:
            raise ValueError("Vocabulary must contain at least one prompt template")
        for template in self.templates:
            if template.count(CATEGORY_PLACEHOLDER) != 1:
                raise ValueError(
                    f"Prompt template must contain {CATEGORY_PLACEHOLDER} exactly once: "
                    f"{template!r}"
                )
        seen = set()
        for name in self.categories:
            if name in seen:
                raise ValueError(f"Duplicate category name: {name!r}")
            seen.add(name)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def num_prompts(self) -> int:
        return len(self.templates)

    def prompts_for(self, category: str) -> List[str]:
        """Render every template for one category."""
        return [template.replace(CATEGORY_PLACEHOLDER, category) for template in self.templates]


@dataclass
class EncodedImage:
    """Stub-encoder output for a batch of images.

    Attributes:
        V: Image-level features, B×C×H×W
        F_mid: Mid-layer features, B×H×W×C
        S_1: Spatial guidance at 2× feature resolution, B×2H×2W×C_s
        S_2: Spatial guidance at 4× feature resolution, B×4H×4W×C_s
    """
    V: torch.Tensor
    F_mid: torch.Tensor
    S_1: torch.Tensor
    S_2: torch.Tensor

    def __post_init__(self) -> None:
        b, c, h, w = self.V.shape
        if tuple(self.F_mid.shape) != (b, h, w, c):
            raise ShapeError(
                f"F_mid shape {tuple(self.F_mid.shape)} does not match V {tuple(self.V.shape)}"
            )
        for level, guide in ((1, self.S_1), (2, self.S_2)):
            scale = 2 ** level
            if guide.shape[0] != b or tuple(guide.shape[1:3]) != (h * scale, w * scale):
                raise ShapeError(
                    f"S_{level} extents {tuple(guide.shape[1:3])} must be {scale}x "
                    f"the feature grid ({h}, {w})"
                )

    @property
    def batch_size(self) -> int:
        return int(self.V.shape[0])

    @property
    def feature_size(self) -> Tuple[int, int]:
        return int(self.V.shape[2]), int(self.V.shape[3])

    @property
    def channels(self) -> int:
        return int(self.V.shape[1])

    def to(self, dtype: torch.dtype) -> "EncodedImage":
        return EncodedImage(
            V=self.V.to(dtype), F_mid=self.F_mid.to(dtype),
            S_1=self.S_1.to(dtype), S_2=self.S_2.to(dtype),
        )

    def select(self, index: Sequence[int]) -> "EncodedImage":
        """Sub-batch by item index."""
        idx = torch.as_tensor(list(index), dtype=torch.long)
        return EncodedImage(
            V=self.V[idx], F_mid=self.F_mid[idx], S_1=self.S_1[idx], S_2=self.S_2[idx]
        )

    @staticmethod
    def concat(items: Sequence["EncodedImage"]) -> "EncodedImage":
        return EncodedImage(
            V=torch.cat([item.V for item in items]),
            F_mid=torch.cat([item.F_mid for item in items]),
            S_1=torch.cat([item.S_1 for item in items]),
            S_2=torch.cat([item.S_2 for item in items]),
        )

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {"V": self.V, "F_mid": self.F_mid, "S_1": self.S_1, "S_2": self.S_2}


@dataclass
class TextBank:
    """Prompt embeddings for a vocabulary.

    Attributes:
        categories: Category names, row order of every tensor
        T: Prompt embeddings, N×P×C
        T_bar: Per-category prompt means, N×C
        E_text: Pooled text tokens projected to D (one per category), N×D;
            attached by the model, None straight out of the stub encoder
    """
    categories: List[str]
    T: torch.Tensor
    T_bar: torch.Tensor
    E_text: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        n = len(self.categories)
        if self.T.dim() != 3 or self.T.shape[0] != n:
            raise ShapeError(f"T must be N×P×C with N={n}, got {tuple(self.T.shape)}")
        if tuple(self.T_bar.shape) != (n, self.T.shape[2]):
            raise ShapeError(f"T_bar must be {n}×{self.T.shape[2]}, got {tuple(self.T_bar.shape)}")
        if self.E_text is not None and self.E_text.shape[0] != n:
            raise ShapeError(f"E_text must have {n} rows, got {tuple(self.E_text.shape)}")

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def num_prompts(self) -> int:
        return int(self.T.shape[1])

    @property
    def channels(self) -> int:
        return int(self.T.shape[2])

    def permute(self, order: Sequence[int]) -> "TextBank":
        """Reorder categories; row i of the result is row order[i] of self."""
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return TextBank(
            categories=[self.categories[i] for i in order],
            T=self.T[idx],
            T_bar=self.T_bar[idx],
            E_text=None if self.E_text is None else self.E_text[idx],
        )

    def to(self, dtype: torch.dtype) -> "TextBank":
        return TextBank(
            categories=list(self.categories),
            T=self.T.to(dtype),
            T_bar=self.T_bar.to(dtype),
            E_text=None if self.E_text is None else self.E_text.to(dtype),
        )

    def tensors(self) -> Dict[str, torch.Tensor]:
        out = {"T": self.T, "T_bar": self.T_bar}
        if self.E_text is not None:
            out["E_text"] = self.E_text
        return out


@dataclass
class RegionGrid:
    """Rectangular r×r partition of an H×W feature grid.

    Attributes:
        r: Grid side; K = r * r
        row_bounds: r+1 row offsets
        col_bounds: r+1 column offsets
        index_map: H×W long tensor, region id of every pixel (row-major over the grid)
    """
    r: int
    row_bounds: List[int]
    col_bounds: List[int]
    index_map: torch.Tensor

    @property
    def num_regions(self) -> int:
        return self.r * self.r

    def members(self, k: int) -> List[Tuple[int, int]]:
        """Pixels of region k in row-major order."""
        gi, gj = divmod(k, self.r)
        return [
            (i, j)
            for i in range(self.row_bounds[gi], self.row_bounds[gi + 1])
            for j in range(self.col_bounds[gj], self.col_bounds[gj + 1])
        ]

    def sizes(self) -> List[int]:
        return [len(self.members(k)) for k in range(self.num_regions)]


@dataclass
class AlignmentState:
    """Intermediates of prior-guided regional alignment for a batch.

    Shapes carry the batch axis B first: p_prior B×N, T_hat B×N×C, v B×K×C,
    A and w B×K×N, m B×N×C, g_region B×N×D, g_image and g_text B×K×D,
    alpha B×K, G B×H×W×D.
    """
    regions: RegionGrid
    p_prior: torch.Tensor
    T_hat: torch.Tensor
    v: torch.Tensor
    A: torch.Tensor
    w: torch.Tensor
    m: torch.Tensor
    g_region: torch.Tensor
    g_image: torch.Tensor
    g_text: torch.Tensor
    alpha: torch.Tensor
    G: torch.Tensor


@dataclass
class Supervision:
    """Ground truth for a batch.

    Attributes:
        Y: One-hot or multi-hot targets, B×N×H0×W0 in {0, 1}
        M: Valid-pixel mask, B×H0×W0 in {0, 1}
    """
    Y: torch.Tensor
    M: torch.Tensor

    @classmethod
    def from_labels(
        cls,
        labels: torch.Tensor,
        mask: torch.Tensor,
        num_categories: int,
        dtype: torch.dtype = torch.float32,
    ) -> "Supervision":
        """Build one-hot supervision from B×H0×W0 integer label maps."""
        safe = labels.clamp(min=0, max=num_categories - 1).long()
        y = torch.nn.functional.one_hot(safe, num_categories).permute(0, 3, 1, 2).to(dtype)
        m = mask.to(dtype)
        return cls(Y=y * m.unsqueeze(1), M=m)


@dataclass
class ShapePlacement:
    """One painted shape in a synthetic scene."""
    kind: ShapeKind
    category: int
    top: int
    left: int
    height: int
    width: int
    area: int


@dataclass
class SyntheticScene:
    """Synthetic image with dense labels.

    Attributes:
        image: H0×W0×3 float64 in [0, 1]
        labels: H0×W0 int64 category indices into vocabulary
        mask: H0×W0 uint8 validity mask
        vocabulary: Category names
        present: Sorted indices of categories that appear in labels
        placements: Placement log of painted shapes
        background: Index of the background category
    """
    image: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    vocabulary: List[str]
    present: List[int]
    placements: List[ShapePlacement] = field(default_factory=list)
    background: int = 0

    @property
    def distractors(self) -> List[int]:
        present = set(self.present)
        return [i for i in range(len(self.vocabulary)) if i not in present]

    def flipped(self) -> "SyntheticScene":
        """Horizontally mirrored copy (placements are dropped)."""
        return SyntheticScene(
            image=np.ascontiguousarray(self.image[:, ::-1]),
            labels=np.ascontiguousarray(self.labels[:, ::-1]),
            mask=np.ascontiguousarray(self.mask[:, ::-1]),
            vocabulary=list(self.vocabulary),
            present=list(self.present),
            placements=[],
            background=self.background,
        )


@dataclass
class ForwardTrace:
    """Optional capture of forward intermediates (detached copies)."""
    p_prior: Optional[torch.Tensor] = None
    T_hat: Optional[torch.Tensor] = None
    A: Optional[torch.Tensor] = None
    w: Optional[torch.Tensor] = None
    G: Optional[torch.Tensor] = None
    X_fused: Optional[torch.Tensor] = None
    queries: Optional[torch.Tensor] = None
    decoder_stages: List[torch.Tensor] = field(default_factory=list)
    alignment: Optional[AlignmentState] = None
    categories: List[str] = field(default_factory=list)
