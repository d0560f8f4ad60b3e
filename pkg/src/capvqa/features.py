"""Pluggable feature stem in place of a pretrained backbone.

Two sources produce the raw h x w x d1 feature grid: a small trainable
conv stem over image rasters (synthetic data) or precomputed feature-grid
files (real-data runs, e.g. 7x7x2048).  A 2D convolution then projects the
grid to the model dimension.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn


class FeatureShapeError(ValueError):
    """Feature grid does not match the configured shape."""


class ConvStem(nn.Module):
    """Small strided CNN: one output cell per image patch, with enough
    nonlinear depth to encode sub-patch structure (shape, not just color)."""

    def __init__(self, grid_h: int, grid_w: int, image_size: int, channels: int):
        super().__init__()
        if image_size % grid_h != 0 or image_size % grid_w != 0:
            raise FeatureShapeError(
                f"image size {image_size} not divisible into {grid_h}x{grid_w} cells"
            )
        if image_size // grid_h != image_size // grid_w:
            raise FeatureShapeError("cells must be square for the conv stem")
        self.grid_h, self.grid_w = grid_h, grid_w
        layers: list[nn.Module] = []
        cell = image_size // grid_h
        width = min(16, channels)
        in_ch = 3
        while cell > 1:
            if cell % 2 == 0:
                stride, kernel, pad = 2, 3, 1
            else:
                stride, kernel, pad = cell, cell, 0
            out_ch = channels if cell // stride == 1 else width
            layers += [nn.Conv2d(in_ch, out_ch, kernel, stride, pad), nn.GELU()]
            in_ch = out_ch
            width = min(width * 2, channels)
            cell //= stride
        if not layers:  # 1px cells: plain pointwise projection
            layers = [nn.Conv2d(3, channels, 1), nn.GELU()]
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) in [0, 1] -> (B, h, w, channels)."""
        out = self.net(images * 2.0 - 1.0)
        if out.shape[2] != self.grid_h or out.shape[3] != self.grid_w:
            raise FeatureShapeError(
                f"stem produced grid {tuple(out.shape[2:])}, expected "
                f"({self.grid_h}, {self.grid_w})"
            )
        return out.permute(0, 2, 3, 1)


class GridProjection(nn.Module):
    """2D conv from raw feature channels d1 to the model dimension d."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, dim, kernel_size=1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """grid: (B, h, w, d1) -> (B, h, w, d)."""
        return self.conv(grid.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


def load_feature_grid(
    path: str | Path, grid_h: int, grid_w: int, channels: int
) -> torch.Tensor:
    """Load one precomputed (h, w, d1) feature grid from a .npy file."""
    arr = np.load(Path(path))
    if arr.shape != (grid_h, grid_w, channels):
        raise FeatureShapeError(
            f"feature grid {path} has shape {arr.shape}, config expects "
            f"({grid_h}, {grid_w}, {channels})"
        )
    return torch.from_numpy(np.ascontiguousarray(arr)).float()
