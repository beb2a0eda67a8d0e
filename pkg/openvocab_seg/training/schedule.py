"""Warm-up cosine schedule, AdamW parameter groups and the guarded optimizer step."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from openvocab_seg.model.config import TrainingConfig
from openvocab_seg.shared.exceptions import NumericalError


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Linear warm-up to base_lr, then cosine decay to min_lr at total_steps."""
    warmup_steps: int
    total_steps: int
    base_lr: float
    min_lr: float = 0.0

    def __post_init__(self) -> None:
        too_long = self.total_steps > 0 and self.warmup_steps >= self.total_steps
        if self.warmup_steps < 0 or too_long:
            raise ValueError(
                f"warm-up must satisfy 0 <= warmup_steps < total_steps, "
                f"got {self.warmup_steps}, {self.total_steps}"
            )
        if self.min_lr > self.base_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")

    @classmethod
    def from_config(cls, config: TrainingConfig) -> "Schedule":
        return cls(
            warmup_steps=config.warmup_steps,
            total_steps=config.iterations,
            base_lr=config.base_lr,
            min_lr=config.min_lr,
        )


def lr_at(step: float, schedule: Schedule) -> float:
    """Learning rate at an optimizer step; steps past total_steps clamp to min_lr."""
    if step > schedule.total_steps:
        return schedule.min_lr
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span if span > 0 else 1.0
    drop = schedule.base_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * drop * (1.0 + math.cos(math.pi * progress))


def build_optimizer(
    groups: Dict[str, List[nn.Parameter]],
    config: TrainingConfig,
) -> Tuple[AdamW, LambdaLR]:
    """AdamW over named parameter groups plus the warm-up cosine scheduler.

    The 'encoder' group (trainable stub encoder) runs at base_lr * encoder_lr_scale;
    the schedule multiplies every group's rate.
    """
    schedule = Schedule.from_config(config)
    param_groups = []
    for name, params in groups.items():
        scale = config.encoder_lr_scale if name == "encoder" else 1.0
        param_groups.append({"params": params, "lr": config.base_lr * scale, "name": name})
    optimizer = AdamW(
        param_groups,
        lr=config.base_lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
        foreach=False,
    )
    scheduler = LambdaLR(optimizer, lambda step: lr_at(step, schedule) / schedule.base_lr)
    return optimizer, scheduler


def current_lr(optimizer: AdamW, group: str = "model") -> float:
    for param_group in optimizer.param_groups:
        if param_group.get("name") == group:
            return float(param_group["lr"])
    return float(optimizer.param_groups[0]["lr"])


def optimizer_step(optimizer: AdamW, scheduler: Optional[LambdaLR] = None) -> None:
    """Apply one AdamW update (decoupled decay) and advance the schedule.

    Raises:
        NumericalError: If any gradient is NaN or infinite; no parameter is touched
    """
    for group in optimizer.param_groups:
        for index, param in enumerate(group["params"]):
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                raise NumericalError(
                    f"non-finite gradient in group {group.get('name', '?')!r}, parameter {index} "
                    f"of shape {tuple(param.shape)}; step aborted"
                )
    optimizer.step()
    if scheduler is not None:
        scheduler.step()


def restore_schedule(optimizer: AdamW, scheduler: LambdaLR, step: int) -> None:
    """Position a fresh scheduler at a resumed step."""
    scheduler.last_epoch = step
    for group, base_lr, fn in zip(optimizer.param_groups, scheduler.base_lrs, scheduler.lr_lambdas):
        group["lr"] = base_lr * fn(step)
