"""Masked conditional-diffusion forecasting for mobile-network time series."""

__version__ = "0.1.0"
