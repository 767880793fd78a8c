"""Gaussian splatting to SuGaR mesh optimization with score-distillation guidance."""

__version__ = "0.1.0"
