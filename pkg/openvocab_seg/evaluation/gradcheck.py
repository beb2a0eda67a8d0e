"""Finite-difference gradient checks of every differentiable stage, at float64."""

import logging
from typing import Callable, Dict, List, Sequence

import torch

from openvocab_seg.model.assembly import build_model
from openvocab_seg.model.config import AlignConfig, DecoderConfig, FusionConfig, ModelConfig
from openvocab_seg.model.decoder import GuidedDecoder, bce_loss, final_resize
from openvocab_seg.model.fusion import ContextualFusion
from openvocab_seg.model.prior_align import PriorGuidedAlignment
from openvocab_seg.shared.models import Precision, Supervision, VocabularySpec
from openvocab_seg.shared.numerics import (
    GradCheckReport,
    bilinear_resize,
    cosine_matrix,
    grad_check,
    softmax_axis,
)


logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
MODEL_IMAGE_SIZE = 32
MODEL_CATEGORIES = ("background", "kettle", "lantern")
MODEL_PARAM_FRACTION = 0.01

DTYPE = torch.float64


def _leaf(generator: torch.Generator, *shape: int) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE).requires_grad_(True)


def check_numerics(seed: int) -> GradCheckReport:
    """Cosine matrix, tempered softmax and bilinear resize chained into one scalar."""
    gen = torch.Generator().manual_seed(seed)
    a = _leaf(gen, 2, 5, 6)
    b = _leaf(gen, 3, 6)
    x = _leaf(gen, 1, 4, 4, 3)
    r_sims = torch.randn(2, 5, 3, generator=gen, dtype=DTYPE)
    r_resize = torch.randn(1, 7, 5, 3, generator=gen, dtype=DTYPE)

    def loss() -> torch.Tensor:
        sims, _ = cosine_matrix(a, b)
        weights = softmax_axis(sims, axis=-2, temperature=5.0)
        resized = bilinear_resize(x, (7, 5))
        return (weights * r_sims).sum() + (resized * r_resize).sum()

    return grad_check(loss, [a, b, x], seed=seed)


def check_prior_align(seed: int) -> GradCheckReport:
    """Object prior through gated guidance, differentiated w.r.t. inputs and weights."""
    gen = torch.Generator().manual_seed(seed)
    config = AlignConfig(region_grid=2, guidance_dim=8, mlp_hidden=8, prior_lambda=0.5)
    module = PriorGuidedAlignment(8, config).to(DTYPE)
    V = _leaf(gen, 1, 8, 4, 4)
    T = _leaf(gen, 3, 2, 8)
    r_G = torch.randn(1, 4, 4, 8, generator=gen, dtype=DTYPE)

    def loss() -> torch.Tensor:
        return (module(V, T).G * r_G).sum()

    return grad_check(loss, [V, T, *module.parameters()], seed=seed)


def check_fusion(seed: int) -> GradCheckReport:
    """One fusion block with every branch enabled."""
    gen = torch.Generator().manual_seed(seed)
    config = FusionConfig(depth=1, heads=2, num_queries=2, state_dim=2)
    module = ContextualFusion(8, 8, config).to(DTYPE)
    F_mid = _leaf(gen, 1, 3, 4, 8)
    G = _leaf(gen, 1, 3, 4, 8)
    e_text = _leaf(gen, 3, 8)
    queries = _leaf(gen, 1, 2, 8)
    r_x = torch.randn(1, 3, 4, 8, generator=gen, dtype=DTYPE)
    r_q = torch.randn(1, 2, 8, generator=gen, dtype=DTYPE)

    def loss() -> torch.Tensor:
        x_fused, q = module(F_mid, G, e_text, queries)
        return (x_fused * r_x).sum() + (q * r_q).sum()

    return grad_check(loss, [F_mid, G, e_text, queries, *module.parameters()], seed=seed)


def check_decoder_loss(seed: int) -> GradCheckReport:
    """Correlation, both decode stages, class logits, resize and the masked loss."""
    gen = torch.Generator().manual_seed(seed)
    module = GuidedDecoder(8, 4, DecoderConfig(channels=4)).to(DTYPE)
    with torch.no_grad():
        # Off-identity modulation so the FiLM weights carry gradient
        for stage in module.stages:
            stage.film.weight.normal_(0.0, 0.1, generator=gen)
    queries = _leaf(gen, 1, 2, 8)
    x_fused = _leaf(gen, 1, 2, 2, 8)
    guides = [_leaf(gen, 1, 4, 4, 4), _leaf(gen, 1, 8, 8, 4)]
    g_hat = _leaf(gen, 1, 3, 8)
    labels = torch.randint(0, 3, (1, 10, 10), generator=gen)
    mask = (torch.rand(1, 10, 10, generator=gen) > 0.2).to(DTYPE)
    target = Supervision.from_labels(labels, mask, 3, DTYPE)

    def loss() -> torch.Tensor:
        logits, _ = module(queries, x_fused, guides, g_hat)
        return bce_loss(final_resize(logits, 10, 10), target.Y, target.M)

    return grad_check(loss, [queries, x_fused, *guides, g_hat, *module.parameters()], seed=seed)


def check_model(seed: int) -> GradCheckReport:
    """Assembled model on a 32×32 image with three categories, over a sampled 1% of parameters."""
    config = ModelConfig().with_overrides({
        "seed": seed,
        "precision": Precision.F64.value,
        "data.image_size": MODEL_IMAGE_SIZE,
    })
    model = build_model(config)
    gen = torch.Generator().manual_seed(seed)
    image = torch.rand(1, MODEL_IMAGE_SIZE, MODEL_IMAGE_SIZE, 3, generator=gen, dtype=DTYPE)
    vocabulary = VocabularySpec(categories=list(MODEL_CATEGORIES))
    size = (1, MODEL_IMAGE_SIZE, MODEL_IMAGE_SIZE)
    labels = torch.randint(0, len(MODEL_CATEGORIES), size, generator=gen)
    target = Supervision.from_labels(labels, torch.ones_like(labels), len(MODEL_CATEGORIES), DTYPE)
    params = [p for p in model.parameters() if p.requires_grad]

    def loss() -> torch.Tensor:
        return bce_loss(model(image, vocabulary), target.Y, target.M)

    return grad_check(loss, params, fraction=MODEL_PARAM_FRACTION, seed=seed)


MODULE_CHECKS: Dict[str, Callable[[int], GradCheckReport]] = {
    "numerics": check_numerics,
    "prior_align": check_prior_align,
    "fusion": check_fusion,
    "decoder_loss": check_decoder_loss,
    "model": check_model,
}


def run_gradcheck_suite(
    seed: int = 0,
    modules: Sequence[str] = tuple(MODULE_CHECKS),
    tolerance: float = TOLERANCE,
) -> List[Dict[str, object]]:
    """One record per module: max relative error, coordinates checked, pass/fail."""
    records = []
    for name in modules:
        report = MODULE_CHECKS[name](seed)
        passed = report.passed(tolerance)
        records.append({
            "module": name,
            "max_relative_error": report.max_relative_error,
            "checked": report.checked,
            "tolerance": tolerance,
            "passed": passed,
        })
        log = logger.info if passed else logger.error
        log(
            f"gradcheck {name}: max relative error {report.max_relative_error:.3e} "
            f"over {report.checked} coordinate(s)"
        )
    return records
