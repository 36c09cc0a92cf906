"""Unpaired image translation that keeps frozen-estimator predictions consistent with source ground truth."""

__version__ = "0.1.0"
