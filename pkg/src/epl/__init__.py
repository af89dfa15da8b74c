"""Evidential prototype learning: evidential fusion, dual uncertainty and
uncertainty-masked prototypes for semi-supervised volumetric segmentation."""

__version__ = "0.1.0"
