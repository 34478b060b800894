"""Deterministic morphometry pipeline for biomarker prediction from H&E patches."""

__version__ = "0.1.0"
