"""Mitotic-figure detection as image classification, captioning and VQA."""

__version__ = "0.1.0"
