"""Conditional density estimation over discretized targets: multiscale nets,
CDE trend filtering, and the multinomial, mixture-density and point baselines."""

__version__ = "0.1.0"
