"""Weakly supervised lesion segmentation from windowed-attention classifier maps."""

__version__ = "0.1.0"
