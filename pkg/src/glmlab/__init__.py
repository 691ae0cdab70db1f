"""Desk-scale laboratory for GLM-style pretraining mechanics."""

__version__ = "0.1.0"
