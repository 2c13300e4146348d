"""Counterfactual outcome estimation over time with sub-group alignment and temporal masking."""

__version__ = "0.1.0"
