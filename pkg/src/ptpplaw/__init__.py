"""PTPP-aware continual pre-training scaling laws: fitting, forecasting and replay planning."""

__version__ = "0.1.0"
