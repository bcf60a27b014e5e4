"""Bunching estimators for kinked schedules, with treatment effects on bunchers and shifters."""

__version__ = "0.1.0"
