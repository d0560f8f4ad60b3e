"""Attention-map extraction from cross-modal records and heatmap rendering.

Grounding reads the [IMG]-query row of the visual-stream self-attention in
a chosen cross-modal block: the [IMG]->[IMG] self score is dropped and the
remaining per-token scores are reshaped row-major back onto the spatial
grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pnm

GROUNDING_DIRECTION = "vision_self"


@dataclass
class AttentionMap:
    grid: np.ndarray  # (h, w) non-negative scores
    layer: int
    head: int | str  # head index or "mean"
    query: str = "img"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"attention map must be 2-d, got {self.grid.shape}")
        if not np.isfinite(self.grid).all() or (self.grid < 0).any():
            raise ValueError("attention map must be finite and non-negative")


def _img_row(records: list[dict], layer: int) -> np.ndarray:
    """(heads, 1 + h*w) [IMG]-query attention rows of the requested layer."""
    n_layers = len(records)
    if layer < 0:
        layer += n_layers
    if not 0 <= layer < n_layers:
        raise IndexError(f"cross layer {layer} out of range (have {n_layers})")
    scores = np.asarray(records[layer][GROUNDING_DIRECTION], dtype=np.float64)
    if scores.ndim != 3:
        raise ValueError(
            f"expected per-sample (heads, S, S) scores, got {scores.shape}"
        )
    return scores[:, 0, :]


def extract_attention(
    records: list[dict],
    grid_hw: tuple[int, int],
    layer: int = -1,
    head: int | str = "mean",
) -> AttentionMap:
    """records: one sample's per-block direction->(heads, S, S) score arrays."""
    rows = _img_row(records, layer)
    n_heads = rows.shape[0]
    h, w = grid_hw
    if rows.shape[1] != h * w + 1:
        raise ValueError(
            f"attention row length {rows.shape[1]} != 1 + {h}*{w}"
        )
    if head == "mean":
        row = rows.mean(axis=0)
    else:
        if not 0 <= int(head) < n_heads:
            raise IndexError(f"head {head} out of range (have {n_heads})")
        row = rows[int(head)]
    # Drop the [IMG]->[IMG] self score, then reshape row-major to the grid.
    return AttentionMap(grid=row[1:].reshape(h, w), layer=layer, head=head)


def per_head_maps(
    records: list[dict], grid_hw: tuple[int, int], layer: int = -1
) -> list[AttentionMap]:
    n_heads = _img_row(records, layer).shape[0]
    return [extract_attention(records, grid_hw, layer, k) for k in range(n_heads)]


def normalize_map(amap: AttentionMap) -> AttentionMap:
    """Divide by the maximum; all-zero maps pass through unchanged."""
    peak = amap.grid.max()
    if peak == 0.0:
        return AttentionMap(amap.grid.copy(), amap.layer, amap.head, amap.query)
    return AttentionMap(amap.grid / peak, amap.layer, amap.head, amap.query)


def save_attention_map(path: str | Path, amap: AttentionMap) -> None:
    path = Path(path)
    np.save(path.with_suffix(".npy"), amap.grid)
    meta = {
        "layer": amap.layer,
        "head": amap.head,
        "query": amap.query,
        "grid": list(amap.grid.shape),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_attention_map(path: str | Path) -> AttentionMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return AttentionMap(
        grid=np.load(path.with_suffix(".npy")),
        layer=meta["layer"],
        head=meta["head"],
        query=meta.get("query", "img"),
    )


# Fixed overlay palette: ground truth, detections, pointing-game center.
GT_COLOR = (60, 120, 255)
DET_COLOR = (255, 160, 40)
POINT_COLOR = (80, 255, 80)


def _draw_box(image: np.ndarray, box, color) -> None:
    h, w = image.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return
    image[y0, x0:x1] = color
    image[y1 - 1, x0:x1] = color
    image[y0:y1, x0] = color
    image[y0:y1, x1 - 1] = color


def render_heatmap(
    amap: AttentionMap,
    out_size: int,
    gt_boxes_px: list | None = None,
    det_boxes_grid: list | None = None,
    point_grid: tuple[float, float] | None = None,
) -> np.ndarray:
    """Grayscale heatmap at pixel resolution with overlay boxes drawn on top."""
    h, w = amap.grid.shape
    peak = amap.grid.max()
    gray = amap.grid / peak if peak > 0 else amap.grid
    scale_y, scale_x = out_size / h, out_size / w
    up = np.repeat(np.repeat(gray, int(scale_y), axis=0), int(scale_x), axis=1)
    up = np.round(up * 255).astype(np.uint8)
    image = np.stack([up, up, up], axis=-1)
    for box in gt_boxes_px or []:
        _draw_box(image, box, GT_COLOR)
    for box in det_boxes_grid or []:
        x0, y0, x1, y1 = box
        _draw_box(
            image, (x0 * scale_x, y0 * scale_y, x1 * scale_x, y1 * scale_y), DET_COLOR
        )
    if point_grid is not None:
        r, c = point_grid
        py = int(round((r + 0.5) * scale_y))
        px = int(round((c + 0.5) * scale_x))
        if 0 <= py < image.shape[0] and 0 <= px < image.shape[1]:
            image[max(py - 1, 0) : py + 2, max(px - 1, 0) : px + 2] = POINT_COLOR
    return image


def write_heatmap(path: str | Path, image: np.ndarray) -> None:
    pnm.write_ppm(path, image)
