"""Patch-text alignment pre-training for document images."""

from .geometry import BBox, PatchGrid, TargetMatrix, build_target_matrix, target_row

__version__ = "0.1.0"

__all__ = ["BBox", "PatchGrid", "TargetMatrix", "build_target_matrix", "target_row"]
