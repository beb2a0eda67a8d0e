"""Single-stage forward pass: encode -> align -> fuse -> decode.

The model processes categories in sorted name order and restores the caller's
order on the way out, so permuting the vocabulary permutes logit channels
exactly.
"""

import logging
import math
from collections import Counter
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from openvocab_seg.model.config import ModelConfig, ensure_valid
from openvocab_seg.model.decoder import DecodeStage, GuidedDecoder, final_resize
from openvocab_seg.model.encoders import StubImageEncoder, StubTextEncoder
from openvocab_seg.model.fusion import ContextualFusion, StateSpaceScan2D
from openvocab_seg.model.prior_align import (
    PriorGuidedAlignment,
    object_prior,
    weighted_prompt_center,
)
from openvocab_seg.shared.exceptions import NumericalError, ShapeError
from openvocab_seg.shared.models import EncodedImage, ForwardTrace, TextBank, VocabularySpec


logger = logging.getLogger(__name__)

ALIGNMENT_OPERATIONS = (
    "region_partition",
    "region_similarity",
    "region_weights",
    "visual_prototypes",
    "textual_guidance",
    "visual_guidance",
    "integrate_guidance",
)
PRIOR_OPERATIONS = ("object_prior", "weighted_prompt_center")

Vocabulary = Union[VocabularySpec, TextBank]


@contextmanager
def _stage(name: str) -> Iterator[None]:
    """Prefix errors escaping a pipeline stage with the stage name."""
    try:
        yield
    except NumericalError as e:
        raise NumericalError(f"[{name}] {e.message}", dump_path=e.dump_path) from e
    except ShapeError as e:
        raise ShapeError(f"[{name}] {e}") from e
    except ValueError as e:
        raise ValueError(f"[{name}] {e}") from e


def initialize_parameters(
    model: nn.Module, seed: int, queries: Optional[nn.Parameter] = None
) -> None:
    """Fan-in uniform projections, zero biases, unit LayerNorm gains, seeded queries.

    Decoder upsampling/FiLM heads and scan parameters keep their own structured
    initialisation; the scan readouts draw from the same seeded generator.
    """
    generator = torch.Generator().manual_seed(seed)
    structured = {
        id(sub)
        for stage in model.modules() if isinstance(stage, DecodeStage)
        for sub in (stage.upsample, stage.film)
    }
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, StateSpaceScan2D):
                module.reset_parameters(generator)
            elif isinstance(module, (nn.Linear, nn.Conv2d)) and id(module) not in structured:
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                module.weight.copy_(_uniform(module.weight, bound, generator))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, DecodeStage):
                module.reset_parameters()
        if queries is not None:
            draw = torch.randn(queries.shape, generator=generator, dtype=torch.float64)
            queries.copy_(draw / math.sqrt(queries.shape[-1]))


def _uniform(like: torch.Tensor, bound: float, generator: torch.Generator) -> torch.Tensor:
    draw = torch.rand(like.shape, generator=generator, dtype=torch.float64)
    return ((2.0 * draw - 1.0) * bound).to(like.dtype)


class OpenVocabSegmenter(nn.Module):
    """Prior-guided alignment, contextual fusion and guided decoding over a runtime vocabulary.

    Attributes:
        op_counts: Executed alignment/fusion operations, accumulated across forwards
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = ensure_valid(config)
        enc, align, flags = config.encoder, config.align, config.ablation
        c, d = enc.channels, align.guidance_dim

        self.image_encoder = StubImageEncoder(enc)
        self.text_encoder = StubTextEncoder(enc)
        self.pooled_text = nn.Linear(c, d)
        self.queries = nn.Parameter(torch.zeros(config.fusion.num_queries, d))

        self.alignment = PriorGuidedAlignment(c, align) if flags.use_region_alignment else None
        self.global_guidance = None if flags.use_region_alignment else nn.Linear(c, d)
        if align.adaptive_prior and flags.use_object_prior and not flags.use_region_alignment:
            self.prior_logit: Optional[nn.Parameter] = nn.Parameter(torch.zeros(()))
        else:
            self.register_parameter("prior_logit", None)
        self.fusion = ContextualFusion(c, d, config.fusion) if flags.use_ccf else None
        self.fusion_bypass = None if flags.use_ccf else nn.Linear(c + d, d)
        self.decoder = GuidedDecoder(d, enc.guidance_channels, config.decoder)

        initialize_parameters(self, config.seed, self.queries)
        self.to(config.dtype)
        self.op_counts: Counter = Counter()
        self._text_cache: Dict[Tuple, TextBank] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.queries.dtype

    @property
    def prior_weight(self) -> Union[float, torch.Tensor]:
        """Lambda of the prior-only path: sigmoid(theta) when adaptive, else the fixed value."""
        if self.prior_logit is not None:
            return torch.sigmoid(self.prior_logit)
        return self.config.align.prior_lambda

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Trainable parameters split into the 'model' and (stub-encoder) 'encoder' groups."""
        encoder_ids = {id(p) for p in self.image_encoder.parameters()}
        groups = {
            "model": [p for p in self.parameters() if id(p) not in encoder_ids],
            "encoder": list(self.image_encoder.parameters()),
        }
        return {name: params for name, params in groups.items() if params}

    def text_bank(self, vocabulary: Vocabulary) -> TextBank:
        """Stub text embeddings for a vocabulary, at the model's precision."""
        if isinstance(vocabulary, TextBank):
            return vocabulary.to(self.dtype)
        key = (tuple(vocabulary.categories), tuple(vocabulary.templates))
        if key not in self._text_cache:
            self._text_cache[key] = self.text_encoder.encode(vocabulary, dtype=self.dtype)
        return self._text_cache[key]

    def encode_images(self, images: torch.Tensor) -> EncodedImage:
        """Stub features for B×H0×W0×3 images (no graph unless the encoder is trainable)."""
        images = torch.as_tensor(images)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if self.config.encoder.trainable:
            return self.image_encoder(images.to(self.dtype))
        with torch.no_grad():
            return self.image_encoder(images.to(self.dtype))

    def _count(self, *names: str) -> None:
        self.op_counts.update(names)

    def forward(
        self,
        images: Union[torch.Tensor, EncodedImage],
        vocabulary: Vocabulary,
        trace: bool = False,
        output_size: Optional[Tuple[int, int]] = None,
    ) -> Union[torch.Tensor, Tuple[torch.Tensor, ForwardTrace]]:
        """Segment a batch against a vocabulary.

        Args:
            images: B×H0×W0×3 pixels in [0, 1], or precomputed stub features
            vocabulary: Category names and templates, or a precomputed TextBank
            trace: Also return detached intermediates
            output_size: (H0, W0) when images are precomputed features
                (default: patch size × feature extent)

        Returns:
            Logits B×N×H0×W0 in caller category order, plus a ForwardTrace when trace is set
        """
        flags = self.config.ablation
        bank = self.text_bank(vocabulary)
        order = sorted(range(bank.num_categories), key=lambda i: bank.categories[i])
        restore = torch.as_tensor(np.argsort(order), dtype=torch.long)
        bank = bank.permute(order)

        with _stage("encoder_io"):
            encoded = images if isinstance(images, EncodedImage) else self.encode_images(images)
            encoded = encoded.to(self.dtype)
        V = encoded.V
        b = V.shape[0]
        h, w = encoded.feature_size
        p = self.config.encoder.patch_size
        out_h, out_w = output_size or (h * p, w * p)
        T = bank.T
        T_bar = bank.T_bar
        e_text = self.pooled_text(T_bar)
        state = None

        with _stage("prior_align"):
            if self.alignment is not None:
                state = self.alignment(V, T, use_prior=flags.use_object_prior)
                if flags.use_object_prior:
                    self._count(*PRIOR_OPERATIONS)
                self._count(*ALIGNMENT_OPERATIONS)
                G = state.G
                g_hat = state.g_region
                p_prior, T_hat = state.p_prior, state.T_hat
            else:
                if flags.use_object_prior:
                    p_prior = object_prior(V, T_bar)
                    lam = self.prior_weight
                    T_hat = weighted_prompt_center(T, p_prior, lam)
                    self._count(*PRIOR_OPERATIONS)
                else:
                    p_prior = None
                    T_hat = T_bar.unsqueeze(0).expand(b, -1, -1)
                g_global = self.global_guidance(V.mean(dim=(2, 3)))
                G = g_global[:, None, None, :].expand(b, h, w, g_global.shape[-1])
                g_hat = self.pooled_text(T_hat)

        queries = self.queries.unsqueeze(0).expand(b, -1, -1)
        with _stage("fusion"):
            if self.fusion is not None:
                x_fused, queries = self.fusion(encoded.F_mid, G, e_text, queries)
                self._count(*self.fusion.operations())
            else:
                x_fused = self.fusion_bypass(torch.cat([encoded.F_mid, G], dim=-1))

        with _stage("decoder_loss"):
            logits, stages = self.decoder(queries, x_fused, [encoded.S_1, encoded.S_2], g_hat)
            logits = final_resize(logits, out_h, out_w)
        logits = logits[:, restore]

        if not trace:
            return logits
        record = ForwardTrace(
            p_prior=None if p_prior is None else p_prior.detach()[:, restore].clone(),
            T_hat=T_hat.detach()[:, restore].clone(),
            A=None if state is None else state.A.detach()[..., restore].clone(),
            w=None if state is None else state.w.detach()[..., restore].clone(),
            G=G.detach().clone(),
            X_fused=x_fused.detach().clone(),
            queries=queries.detach().clone(),
            decoder_stages=[s.detach().clone() for s in stages],
            alignment=state,
            categories=[bank.categories[i] for i in restore.tolist()],
        )
        return logits, record

    def predict(
        self, images: Union[torch.Tensor, EncodedImage], vocabulary: Vocabulary
    ) -> torch.Tensor:
        """Argmax label maps, B×H0×W0."""
        with torch.no_grad():
            return self(images, vocabulary).argmax(dim=1)


def build_model(config: ModelConfig) -> OpenVocabSegmenter:
    """Validate config and construct a freshly initialised model."""
    model = OpenVocabSegmenter(config)
    count = sum(p.numel() for p in model.parameters() if p.requires_grad)
    logger.info(
        f"Built model with {count} trainable parameters (precision {config.precision.value})"
    )
    return model
