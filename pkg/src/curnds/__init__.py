"""CURNDS compartmental model: fitting, forecasting and latent-state reconstruction."""

__version__ = "0.1.0"
