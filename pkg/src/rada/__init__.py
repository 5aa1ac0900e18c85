"""Rational-matrix adaptation for vision-language classification heads."""

__version__ = "0.1.0"
