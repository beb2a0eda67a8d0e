"""Shared data models and utilities used across the model, training and evaluation tiers."""
