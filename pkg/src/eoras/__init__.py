"""Desk-scale video amodal segmentation: model, data generator, evaluation."""

__version__ = "0.1.0"
