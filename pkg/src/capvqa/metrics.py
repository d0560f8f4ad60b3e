"""Grounding metrics: region detection, overlap/IOU matching, pointing game,
and rank correlation against human attention maps.

Overlap is asymmetric: precision scores a detection by intersection over the
detection's own area, recall scores a ground-truth box by intersection over
the box's area.  IOU uses intersection over union on both sides.  Ground
truth pixel boxes are rasterized onto the attention grid with a >=50%
cell-coverage rule for the region metrics, and scaled proportionally to
continuous grid coordinates for the pointing game.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
EIGHT_CONN = np.ones((3, 3), dtype=bool)

MODE_OVERLAP = "overlap"
MODE_IOU = "iou"


def f1_score(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0


@dataclass
class Region:
    mask: np.ndarray  # bool (h, w)
    box: tuple[int, int, int, int]  # tight half-open (x0, y0, x1, y1)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class RegionSet:
    regions: list[Region]
    threshold: float
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.regions)


def detect_regions(
    grid: np.ndarray, threshold: float = 0.5, connectivity: int = 4
) -> RegionSet:
    """Threshold (score >= threshold) and split into connected components."""
    grid = np.asarray(grid, dtype=np.float64)
    structure = {4: FOUR_CONN, 8: EIGHT_CONN}[connectivity]
    binary = grid >= threshold
    labels, count = ndimage.label(binary, structure=structure)
    regions = []
    for k in range(1, count + 1):
        mask = labels == k
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        box = (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
        regions.append(Region(mask=mask, box=box))
    return RegionSet(regions=regions, threshold=threshold, shape=grid.shape)


def box_to_cell_mask(
    box_px, image_size: tuple[int, int], grid_hw: tuple[int, int]
) -> np.ndarray:
    """Rasterize a pixel box onto the grid: a cell counts as inside when the
    box covers at least half of the cell's area."""
    img_w, img_h = image_size
    h, w = grid_hw
    x0, y0, x1, y1 = box_px
    cell_w = img_w / w
    cell_h = img_h / h
    mask = np.zeros((h, w), dtype=bool)
    for r in range(h):
        oy = max(0.0, min(y1, (r + 1) * cell_h) - max(y0, r * cell_h))
        if oy <= 0:
            continue
        for c in range(w):
            ox = max(0.0, min(x1, (c + 1) * cell_w) - max(x0, c * cell_w))
            if ox * oy >= 0.5 * cell_w * cell_h:
                mask[r, c] = True
    return mask


def box_to_grid_coords(
    box_px, image_size: tuple[int, int], grid_hw: tuple[int, int]
) -> tuple[float, float, float, float]:
    """Proportionally scale a pixel box into continuous grid coordinates."""
    img_w, img_h = image_size
    h, w = grid_hw
    x0, y0, x1, y1 = box_px
    return (x0 * w / img_w, y0 * h / img_h, x1 * w / img_w, y1 * h / img_h)


@dataclass
class SampleMatch:
    """Cached per-sample geometry so acceptance-threshold sweeps are cheap."""

    inter: np.ndarray  # (n_det, n_gt) intersection areas
    det_areas: np.ndarray  # (n_det,)
    gt_areas: np.ndarray  # (n_gt,)

    @property
    def n_det(self) -> int:
        return len(self.det_areas)

    @property
    def n_gt(self) -> int:
        return len(self.gt_areas)

    def counts(self, mode: str, accept: float) -> tuple[int, int, int, int]:
        """(tp detections, n detections, covered gts, n gts) at one threshold."""
        nd, ng = self.n_det, self.n_gt
        if nd == 0 or ng == 0:
            return 0, nd, 0, ng
        if mode == MODE_OVERLAP:
            prec_score = self.inter / self.det_areas[:, None]
            rec_score = self.inter / self.gt_areas[None, :]
        elif mode == MODE_IOU:
            union = self.det_areas[:, None] + self.gt_areas[None, :] - self.inter
            iou = self.inter / union
            prec_score = rec_score = iou
        else:
            raise ValueError(f"unknown match mode {mode!r}")
        tp = int((prec_score.max(axis=1) > accept).sum())
        covered = int((rec_score.max(axis=0) > accept).sum())
        return tp, nd, covered, ng


def build_match(dets: RegionSet, gt_masks: list[np.ndarray]) -> SampleMatch:
    nd, ng = len(dets), len(gt_masks)
    inter = np.zeros((nd, ng), dtype=np.int64)
    for i, region in enumerate(dets.regions):
        for j, gt in enumerate(gt_masks):
            inter[i, j] = int((region.mask & gt).sum())
    det_areas = np.array([r.area for r in dets.regions], dtype=np.int64)
    gt_areas = np.array([int(g.sum()) for g in gt_masks], dtype=np.int64)
    return SampleMatch(inter=inter, det_areas=det_areas, gt_areas=gt_areas)


def match_metrics(
    dets: RegionSet,
    gt_masks: list[np.ndarray],
    mode: str,
    accept: float = 0.5,
) -> tuple[float, float, float]:
    """Single-sample precision/recall/F1 for one mode at one threshold."""
    tp, nd, covered, ng = build_match(dets, gt_masks).counts(mode, accept)
    p = tp / nd if nd else 0.0
    r = covered / ng if ng else 0.0
    return p, r, f1_score(p, r)


@dataclass
class MetricAccumulator:
    """Pools counts over samples (micro) and keeps per-sample rates (macro).

    Samples with no gt boxes never enter the recall denominator; samples
    with no detections contribute zero true positives.
    """

    mode: str
    accept: float = 0.5
    macro: bool = False
    tp: int = 0
    n_det: int = 0
    covered: int = 0
    n_gt: int = 0
    per_sample: list = field(default_factory=list)

    def add(self, match: SampleMatch) -> None:
        tp, nd, covered, ng = match.counts(self.mode, self.accept)
        self.tp += tp
        self.n_det += nd
        self.covered += covered
        self.n_gt += ng
        self.per_sample.append((tp, nd, covered, ng))

    def result(self) -> tuple[float, float, float]:
        if self.macro:
            precisions = [tp / nd for tp, nd, _, _ in self.per_sample if nd]
            recalls = [cov / ng for _, _, cov, ng in self.per_sample if ng]
            p = float(np.mean(precisions)) if precisions else 0.0
            r = float(np.mean(recalls)) if recalls else 0.0
        else:
            p = self.tp / self.n_det if self.n_det else 0.0
            r = self.covered / self.n_gt if self.n_gt else 0.0
        return p, r, f1_score(p, r)


HIT, MISS, SKIPPED = "hit", "miss", "skipped"


def argmax_cell(grid: np.ndarray) -> tuple[int, int]:
    """Lowest row-major index wins ties."""
    flat = int(np.argmax(grid))
    return flat // grid.shape[1], flat % grid.shape[1]


def pointing_game(per_head_grids: list[np.ndarray], gt_boxes_grid: list) -> str:
    """Single-cluster center of per-head argmax points tested against gt boxes.

    Points live in (row, col) cell coordinates; boxes are half-open
    (x0, y0, x1, y1) in the same units.  Samples without boxes are skipped.
    """
    if not gt_boxes_grid:
        return SKIPPED
    if not per_head_grids:
        raise ValueError("pointing game needs at least one head map")
    points = np.array([argmax_cell(np.asarray(g)) for g in per_head_grids], dtype=float)
    center_r, center_c = points.mean(axis=0)
    for x0, y0, x1, y1 in gt_boxes_grid:
        if x0 <= center_c < x1 and y0 <= center_r < y1:
            return HIT
    return MISS


@dataclass
class PointingTally:
    hits: int = 0
    misses: int = 0
    skipped: int = 0

    def add(self, outcome: str) -> None:
        if outcome == HIT:
            self.hits += 1
        elif outcome == MISS:
            self.misses += 1
        else:
            self.skipped += 1

    @property
    def accuracy(self) -> float | None:
        total = self.hits + self.misses
        return self.hits / total if total else None


def bilinear_resize(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment; identity when the
    size is unchanged."""
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape
    out_h, out_w = out_hw
    if (in_h, in_w) == (out_h, out_w):
        return grid.copy()
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation with average ranks for ties; 0 (with a warning) when
    either input has no rank variance."""
    ra = rankdata(np.asarray(a, dtype=np.float64).ravel())
    rb = rankdata(np.asarray(b, dtype=np.float64).ravel())
    ra -= ra.mean()
    rb -= rb.mean()
    sa = float(ra @ ra)
    sb = float(rb @ rb)
    if sa == 0.0 or sb == 0.0:
        warnings.warn("constant map: rank correlation undefined, reporting 0")
        return 0.0
    denom = sa if sa == sb else float(np.sqrt(sa * sb))
    return float(ra @ rb) / denom


RANK_RESOLUTION = (14, 14)


def rank_correlation(
    sys_grid: np.ndarray,
    human_grids: list[np.ndarray],
    resolution: tuple[int, int] = RANK_RESOLUTION,
) -> float:
    """Mean rank correlation of one system map against its human maps, both
    resized to the common resolution."""
    if not human_grids:
        raise ValueError("rank correlation needs at least one human map")
    sys_r = bilinear_resize(sys_grid, resolution)
    scores = [spearman(sys_r, bilinear_resize(h, resolution)) for h in human_grids]
    return float(np.mean(scores))


SWEEP_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def threshold_sweep(
    matches: list[SampleMatch], mode: str, thresholds=SWEEP_THRESHOLDS, macro: bool = False
) -> list[dict]:
    """Re-score cached detections at every acceptance threshold."""
    rows = []
    for accept in thresholds:
        acc = MetricAccumulator(mode=mode, accept=accept, macro=macro)
        for match in matches:
            acc.add(match)
        p, r, f1 = acc.result()
        rows.append({"threshold": accept, "precision": p, "recall": r, "f1": f1})
    return rows


def group_by_argmax(vectors: np.ndarray) -> list[int]:
    """Assign each row to its highest component (lowest index wins ties)."""
    vectors = np.asarray(vectors)
    return [int(np.argmax(v)) for v in vectors]
