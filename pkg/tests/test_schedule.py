"""Tests for the learning-rate schedule and the guarded AdamW step."""

import math

import pytest
import torch
import torch.nn as nn

from openvocab_seg.model.config import TrainingConfig
from openvocab_seg.shared.exceptions import NumericalError
from openvocab_seg.training.schedule import (
    Schedule,
    build_optimizer,
    current_lr,
    lr_at,
    optimizer_step,
    restore_schedule,
)


@pytest.fixture
def schedule():
    return Schedule(warmup_steps=10, total_steps=110, base_lr=1e-3, min_lr=1e-5)


def scalar_param(value=1.0):
    return nn.Parameter(torch.tensor([value], dtype=torch.float64))


def constant_config(**overrides):
    settings = {"iterations": 10, "warmup_steps": 0, "base_lr": 0.1, "weight_decay": 0.0}
    return TrainingConfig(**{**settings, **overrides})


class TestLearningRate:
    """Tests for warm-up and cosine decay."""

    def test_warmup_is_linear(self, schedule):
        """Test the rate climbs linearly from 0."""
        assert lr_at(0, schedule) == 0.0
        assert lr_at(5, schedule) == pytest.approx(5e-4)

    def test_peak_at_end_of_warmup(self, schedule):
        """Test the cosine phase starts at base_lr."""
        assert lr_at(10, schedule) == pytest.approx(1e-3, abs=1e-15)

    @pytest.mark.parametrize("eps", [1e-3, 1e-6, 1e-9])
    def test_continuous_at_warmup_boundary(self, schedule, eps):
        """Test the rate just left of the boundary approaches the rate at it."""
        left = lr_at(schedule.warmup_steps - eps, schedule)
        right = lr_at(schedule.warmup_steps + eps, schedule)
        at = lr_at(schedule.warmup_steps, schedule)
        assert left < at
        assert at - left == pytest.approx(schedule.base_lr * eps / schedule.warmup_steps, rel=1e-3)
        assert abs(right - at) < 1e-3 * eps

    def test_continuous_at_end(self, schedule):
        """Test the rate approaches min_lr from the left of total_steps."""
        assert lr_at(schedule.total_steps - 1e-9, schedule) == pytest.approx(1e-5, abs=1e-15)

    def test_cosine_midpoint(self, schedule):
        """Test halfway through the decay the rate is min + (base - min) / 2."""
        assert lr_at(60, schedule) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5), abs=1e-15)

    def test_end_and_beyond(self, schedule):
        """Test the rate reaches min_lr at total_steps and stays there."""
        assert lr_at(110, schedule) == pytest.approx(1e-5, abs=1e-15)
        assert lr_at(500, schedule) == 1e-5

    def test_monotone_decay(self, schedule):
        """Test the cosine phase never increases."""
        rates = [lr_at(step, schedule) for step in range(10, 111)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("warmup,total", [(10, 10), (-1, 10)])
    def test_invalid_warmup(self, warmup, total):
        """Test warm-up must be shorter than the run."""
        with pytest.raises(ValueError, match="warm-up"):
            Schedule(warmup_steps=warmup, total_steps=total, base_lr=1e-3)

    def test_floor_above_peak(self):
        """Test min_lr may not exceed base_lr."""
        with pytest.raises(ValueError, match="min_lr"):
            Schedule(warmup_steps=0, total_steps=10, base_lr=1e-3, min_lr=1e-2)


class TestOptimizerStep:
    """Tests for AdamW with decoupled weight decay."""

    def test_single_step_matches_closed_form(self):
        """Test one step with g = 1 moves theta by lr / (1 + eps)."""
        param = scalar_param()
        optimizer, scheduler = build_optimizer({"model": [param]}, constant_config())
        param.grad = torch.ones_like(param)
        optimizer_step(optimizer, scheduler)
        assert param.item() == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)

    def test_zero_gradient_without_decay(self):
        """Test a zero gradient with no decay leaves theta unchanged."""
        param = scalar_param(0.7)
        optimizer, scheduler = build_optimizer({"model": [param]}, constant_config())
        param.grad = torch.zeros_like(param)
        optimizer_step(optimizer, scheduler)
        assert param.item() == 0.7

    def test_decay_only_shrinks(self):
        """Test a zero gradient with decay scales theta by (1 - lr * wd)."""
        param = scalar_param(2.0)
        config = constant_config(weight_decay=0.01)
        optimizer, scheduler = build_optimizer({"model": [param]}, config)
        param.grad = torch.zeros_like(param)
        optimizer_step(optimizer, scheduler)
        assert param.item() == pytest.approx(2.0 * (1.0 - 0.1 * 0.01), abs=1e-12)

    def test_matches_scalar_reference(self):
        """Test several scheduled steps against a hand-written AdamW."""
        config = TrainingConfig(iterations=6, warmup_steps=2, base_lr=0.05, weight_decay=0.1)
        schedule = Schedule.from_config(config)
        param = scalar_param(0.5)
        optimizer, scheduler = build_optimizer({"model": [param]}, config)
        grads = [0.3, -1.2, 0.8, 0.05, -0.4, 2.0]

        theta, m, v = 0.5, 0.0, 0.0
        for step, g in enumerate(grads):
            lr = lr_at(step, schedule)
            theta *= 1.0 - lr * config.weight_decay
            m = config.beta1 * m + (1 - config.beta1) * g
            v = config.beta2 * v + (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1 ** (step + 1))
            v_hat = v / (1 - config.beta2 ** (step + 1))
            theta -= lr * m_hat / (math.sqrt(v_hat) + config.eps)

            param.grad = torch.tensor([g], dtype=torch.float64)
            optimizer_step(optimizer, scheduler)
            assert param.item() == pytest.approx(theta, abs=1e-12)

    def test_non_finite_gradient_aborts(self):
        """Test a NaN gradient raises before any parameter or schedule change."""
        param = scalar_param(1.5)
        optimizer, scheduler = build_optimizer({"model": [param]}, constant_config())
        param.grad = torch.tensor([float("nan")], dtype=torch.float64)
        with pytest.raises(NumericalError, match="non-finite gradient"):
            optimizer_step(optimizer, scheduler)
        assert param.item() == 1.5
        assert scheduler.last_epoch == 0

    def test_encoder_group_rate(self):
        """Test the encoder group runs at encoder_lr_scale times the model rate."""
        config = constant_config(encoder_lr_scale=0.01)
        groups = {"model": [scalar_param()], "encoder": [scalar_param()]}
        optimizer, _ = build_optimizer(groups, config)
        model_lr = current_lr(optimizer, "model")
        assert current_lr(optimizer, "encoder") == pytest.approx(0.01 * model_lr)

    def test_restore_schedule(self):
        """Test a fresh scheduler can be positioned at a resumed step."""
        config = TrainingConfig(iterations=20, warmup_steps=4, base_lr=0.01)
        optimizer, scheduler = build_optimizer({"model": [scalar_param()]}, config)
        restore_schedule(optimizer, scheduler, 7)
        assert current_lr(optimizer) == pytest.approx(lr_at(7, Schedule.from_config(config)))
        assert scheduler.last_epoch == 7
