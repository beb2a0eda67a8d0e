"""Synthetic scenes, sliding-window inference, metrics and benchmark runs."""
