"""Open-vocabulary semantic segmentation with object priors and regional alignment."""

__version__ = "0.1.0"
