"""Configuration schema, flat key-value config files and cross-module validation.

Every hyperparameter lives here. A config file is a flat document of
``section.key = value`` lines with ``#`` comments; ``print-config`` emits one
with the defaults and a comment per field. Environment variables named
``OVSEG_<SECTION>__<KEY>`` (or ``OVSEG_<KEY>`` for top-level fields) override
file values.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from openvocab_seg.shared.exceptions import ConfigurationError
from openvocab_seg.shared.models import Precision


logger = logging.getLogger(__name__)

ENV_PREFIX = "OVSEG_"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EncoderConfig(_Section):
    """Frozen stub backbone."""
    patch_size: int = Field(4, ge=1, description="patch side in pixels")
    channels: int = Field(64, ge=2, description="visual/text embedding width C")
    guidance_channels: int = Field(32, ge=1, description="spatial guidance width C_s")
    seed: int = Field(0, ge=0, description="seed of the frozen backbone weights")
    trainable: bool = Field(
        False, description="train the stub image encoder (lr scaled by training.encoder_lr_scale)"
    )


class AlignConfig(_Section):
    """Prior-guided regional alignment."""
    prior_lambda: float = Field(
        1.0, ge=0.0, le=1.0, description="prior blend weight lambda in [0, 1]"
    )
    adaptive_prior: bool = Field(
        False, description="learn lambda as sigmoid(theta), theta initialised at 0"
    )
    region_temperature: float = Field(5.0, gt=0.0, description="region softmax temperature tau")
    category_temperature: float = Field(
        5.0, gt=0.0, description="category softmax temperature beta"
    )
    region_grid: int = Field(6, ge=1, description="region grid side r (K = r*r regions)")
    guidance_dim: int = Field(32, ge=2, description="guidance/fusion channel width D")
    mlp_hidden: int = Field(32, ge=1, description="hidden width of the region-score MLP")
    norm_clamp: float = Field(
        50.0, gt=0.0, description="clamp on guidance norms inside the gate exponentials"
    )


class FusionConfig(_Section):
    """Contextual cross-modal fusion."""
    depth: int = Field(2, ge=1, description="number of fusion blocks")
    heads: int = Field(
        2, ge=1, description="attention heads (directional and language-query branches)"
    )
    num_queries: int = Field(4, ge=1, description="learnable query count T")
    state_dim: int = Field(4, ge=1, description="state size per channel of the 2D scan")
    mlp_ratio: int = Field(2, ge=1, description="hidden multiplier of the query MLP")
    use_directional_attention: bool = Field(
        True, description="row/column attention local branch (off: pointwise projection)"
    )
    use_global_context: bool = Field(True, description="2D state-space global branch (off: zeros)")
    use_language_query: bool = Field(
        True, description="language-query linear attention (off: queries pass through)"
    )


class DecoderConfig(_Section):
    """Guidance-modulated decoder."""
    channels: int = Field(8, ge=1, description="correlation channels C_dec")
    logit_temperature: float = Field(10.0, gt=0.0, description="initial output temperature tau_out")


class TrainingConfig(_Section):
    """Optimizer, schedule and loop."""
    iterations: int = Field(2000, ge=0, description="optimizer steps")
    batch_size: int = Field(4, ge=1, description="images per step")
    base_lr: float = Field(2e-4, gt=0.0, description="peak learning rate")
    min_lr: float = Field(0.0, ge=0.0, description="learning rate floor of the cosine phase")
    warmup_steps: int = Field(100, ge=0, description="linear warm-up steps")
    weight_decay: float = Field(1e-4, ge=0.0, description="decoupled weight decay")
    beta1: float = Field(0.9, ge=0.0, lt=1.0, description="first-moment decay")
    beta2: float = Field(0.999, ge=0.0, lt=1.0, description="second-moment decay")
    eps: float = Field(1e-8, gt=0.0, description="moment denominator epsilon")
    encoder_lr_scale: float = Field(
        0.01, gt=0.0, description="learning-rate multiplier of the encoder group"
    )
    horizontal_flip: bool = Field(True, description="random horizontal flips")
    log_interval: int = Field(50, ge=1, description="steps between loss log lines")
    checkpoint_interval: int = Field(
        500, ge=0, description="steps between checkpoints (0 = final only)"
    )


class DataConfig(_Section):
    """Synthetic benchmark."""
    image_size: int = Field(64, ge=1, description="scene side H0 = W0 in pixels")
    num_categories: int = Field(16, ge=2, description="vocabulary size N of the benchmark")
    train_scenes: int = Field(64, ge=1, description="training scenes")
    val_scenes: int = Field(16, ge=1, description="validation scenes")
    min_present: int = Field(
        4, ge=1, description="fewest categories present per scene (background included)"
    )
    max_present: int = Field(
        6, ge=1, description="most categories present per scene (background included)"
    )
    noise: float = Field(0.02, ge=0.0, description="pixel noise amplitude")
    max_category_overlap: float = Field(
        0.12, gt=0.0, le=1.0, description="max |cosine| between benchmark category codes"
    )


class EvalConfig(_Section):
    """Sliding-window inference."""
    window: int = Field(64, ge=1, description="window side in pixels")
    stride: Optional[int] = Field(
        None, ge=1, description="window stride in pixels (default window / 2)"
    )

    @property
    def resolved_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.window // 2)


class AblationFlags(_Section):
    """Core-module switches."""
    use_object_prior: bool = Field(True, description="object prior (off: plain prompt means)")
    use_ccf: bool = Field(
        True, description="contextual cross-modal fusion (off: pointwise pass-through)"
    )
    use_region_alignment: bool = Field(
        True, description="region alignment (off: globally pooled guidance)"
    )


class ModelConfig(BaseModel):
    """Complete run configuration."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = Field(0, ge=0, description="seed of parameter init, shuffling and flips")
    precision: Precision = Field(Precision.F32, description="f32 or f64")
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    align: AlignConfig = Field(default_factory=AlignConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationFlags = Field(default_factory=AblationFlags)

    @property
    def feature_size(self) -> int:
        return self.data.image_size // self.encoder.patch_size

    @property
    def dtype(self):
        return self.precision.dtype

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ModelConfig":
        """Copy with dotted-key overrides applied, re-validated."""
        data = self.model_dump(mode="json")
        for key, value in overrides.items():
            _assign(data, key, value)
        return ModelConfig.model_validate(data)


SECTIONS = ("encoder", "align", "fusion", "decoder", "training", "data", "eval", "ablation")


@dataclass(frozen=True)
class ConfigIssue:
    """One violated constraint, naming the fields in conflict."""
    fields: Tuple[str, ...]
    message: str

    def __str__(self) -> str:
        return f"[{', '.join(self.fields)}] {self.message}"


def _assign(data: Dict[str, Any], dotted: str, value: Any) -> None:
    section, _, key = dotted.partition(".")
    if key:
        data.setdefault(section, {})[key] = value
    else:
        data[section] = value


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    lowered = value.lower()
    if lowered in ("none", "null", ""):
        return None
    if lowered in ("true", "false"):
        return lowered == "true"
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    return value


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse flat ``section.key = value`` lines into a nested dict (values unvalidated).

    Raises:
        ConfigurationError: On a line without ``=``
    """
    data: Dict[str, Any] = {}
    issues: List[ConfigIssue] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        key, sep, raw = content.partition("=")
        if not sep:
            message = f"expected 'key = value', got {content!r}"
            issues.append(ConfigIssue((f"line {lineno}",), message))
            continue
        _assign(data, key.strip(), _parse_value(raw))
    if issues:
        raise ConfigurationError(issues)
    return data


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Collect OVSEG_* overrides as dotted keys."""
    environ = os.environ if environ is None else environ
    overrides: Dict[str, Any] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        section, sep, key = name[len(ENV_PREFIX):].lower().partition("__")
        dotted = f"{section}.{key}" if sep else section
        overrides[dotted] = _parse_value(raw)
    return overrides


def _issues_from_validation(error: ValidationError) -> List[ConfigIssue]:
    issues = []
    for item in error.errors():
        loc = ".".join(str(part) for part in item.get("loc", ()))
        issues.append(ConfigIssue((loc or "config",), item.get("msg", "invalid value")))
    return issues


def cross_module_issues(config: ModelConfig) -> List[ConfigIssue]:
    """Constraints that span sections of an otherwise well-typed config."""
    issues: List[ConfigIssue] = []
    enc, align, fusion, data, train, ev = (
        config.encoder, config.align, config.fusion, config.data, config.training, config.eval,
    )

    if data.image_size % enc.patch_size:
        issues.append(ConfigIssue(
            ("data.image_size", "encoder.patch_size"),
            f"image size {data.image_size} is not divisible by patch size {enc.patch_size}",
        ))
    feature = data.image_size // enc.patch_size
    if align.region_grid > feature:
        issues.append(ConfigIssue(
            ("align.region_grid", "data.image_size"),
            f"region_partition requires r <= min(H, W): r = {align.region_grid} exceeds "
            f"feature extent {feature} (image {data.image_size} / patch {enc.patch_size})",
        ))
    if align.guidance_dim % fusion.heads:
        issues.append(ConfigIssue(
            ("align.guidance_dim", "fusion.heads"),
            f"D = {align.guidance_dim} is not divisible by heads = {fusion.heads}",
        ))
    elif (align.guidance_dim // 2) % fusion.heads or align.guidance_dim % 2:
        issues.append(ConfigIssue(
            ("align.guidance_dim", "fusion.heads"),
            f"each directional branch gets D/2 = {align.guidance_dim / 2:g} channels, "
            f"not divisible by heads = {fusion.heads}",
        ))
    if enc.channels % 2:
        issues.append(ConfigIssue(
            ("encoder.channels", "align.guidance_dim"),
            f"C = {enc.channels} must be even to split into horizontal/vertical halves",
        ))
    if ev.resolved_stride > ev.window:
        issues.append(ConfigIssue(
            ("eval.stride", "eval.window"),
            f"stride {ev.resolved_stride} exceeds window {ev.window}",
        ))
    if ev.window % enc.patch_size:
        issues.append(ConfigIssue(
            ("eval.window", "encoder.patch_size"),
            f"window {ev.window} is not divisible by patch size {enc.patch_size}",
        ))
    elif ev.window < data.image_size and align.region_grid > ev.window // enc.patch_size:
        issues.append(ConfigIssue(
            ("align.region_grid", "eval.window"),
            f"region grid {align.region_grid} exceeds the window feature extent "
            f"{ev.window // enc.patch_size}",
        ))
    if train.iterations > 0 and train.warmup_steps >= train.iterations:
        issues.append(ConfigIssue(
            ("training.warmup_steps", "training.iterations"),
            f"warm-up {train.warmup_steps} must be shorter than the run ({train.iterations} steps)",
        ))
    if train.min_lr > train.base_lr:
        issues.append(ConfigIssue(
            ("training.min_lr", "training.base_lr"),
            f"min_lr {train.min_lr} exceeds base_lr {train.base_lr}",
        ))
    if data.min_present > data.max_present:
        issues.append(ConfigIssue(
            ("data.min_present", "data.max_present"),
            f"min_present {data.min_present} exceeds max_present {data.max_present}",
        ))
    if data.max_present > data.num_categories:
        issues.append(ConfigIssue(
            ("data.max_present", "data.num_categories"),
            f"max_present {data.max_present} exceeds the vocabulary size {data.num_categories}",
        ))
    return issues


def validate_config(config: Union[ModelConfig, Mapping[str, Any]]) -> List[ConfigIssue]:
    """Check a config; an empty list means it is valid.

    Args:
        config: A ModelConfig or a raw nested mapping

    Returns:
        Every violated constraint
    """
    if not isinstance(config, ModelConfig):
        try:
            config = ModelConfig.model_validate(dict(config))
        except ValidationError as e:
            return _issues_from_validation(e)
    return cross_module_issues(config)


def ensure_valid(config: ModelConfig) -> ModelConfig:
    """Return config, or raise ConfigurationError listing every issue."""
    issues = validate_config(config)
    if issues:
        for issue in issues:
            logger.error(f"Configuration error: {issue}")
        raise ConfigurationError(issues)
    return config


def load_config(
    path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ModelConfig:
    """Resolve defaults <- file <- environment <- explicit overrides, then validate.

    Raises:
        ConfigurationError: If the result violates any constraint
    """
    data: Dict[str, Any] = {}
    if path is not None:
        data = parse_config_text(Path(path).read_text(encoding="utf-8"))
    for key, value in env_overrides(environ).items():
        _assign(data, key, value)
    for key, value in (overrides or {}).items():
        _assign(data, key, value)
    try:
        config = ModelConfig.model_validate(data)
    except ValidationError as e:
        issues = _issues_from_validation(e)
        for issue in issues:
            logger.error(f"Configuration error: {issue}")
        raise ConfigurationError(issues) from e
    return ensure_valid(config)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def dump_config(config: ModelConfig) -> str:
    """Render a config as the flat key-value document load_config reads."""
    lines = ["# openvocab-seg configuration", ""]
    top = config.model_dump(mode="json")
    for name in ("seed", "precision"):
        description = ModelConfig.model_fields[name].description
        lines.append(f"# {description}")
        lines.append(f"{name} = {_format_value(top[name])}")
    for section in SECTIONS:
        model = getattr(config, section)
        lines.append("")
        lines.append(f"# [{section}] {type(model).__doc__.strip()}")
        for key, info in type(model).model_fields.items():
            value = _format_value(top[section][key])
            lines.append(f"{section}.{key} = {value}  # {info.description}")
    return "\n".join(lines) + "\n"
