"""Backpropagation-free test-time adaptation for segmentation under image corruption."""

__version__ = "0.1.0"
