"""Sepsis risk workbench: imputation, propagated uncertainty, active sensing."""

__version__ = "0.1.0"
