"""Grounding metrics against independent brute-force oracles."""

import numpy as np
import pytest
from scipy.stats import spearmanr

from capvqa.metrics import (
    HIT,
    MISS,
    MODE_IOU,
    MODE_OVERLAP,
    SKIPPED,
    MetricAccumulator,
    SampleMatch,
    argmax_cell,
    bilinear_resize,
    box_to_cell_mask,
    box_to_grid_coords,
    build_match,
    detect_regions,
    f1_score,
    group_by_argmax,
    match_metrics,
    pointing_game,
    rank_correlation,
    spearman,
    threshold_sweep,
)


# ---------------------------------------------------------------------------
# Brute-force oracles (independent of the implementations they check)


def flood_fill_components(binary, connectivity=4):
    """Stack-based flood fill over the boolean grid."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    for r in range(h):
        for c in range(w):
            if not binary[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            cells = set()
            while stack:
                y, x = stack.pop()
                cells.add((y, x))
                for dy, dx in offsets:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            comps.append(frozenset(cells))
    return comps


def pixel_count_oracle(det_masks, gt_masks, mode, accept):
    """Pixel-by-pixel counting of intersections, unions, TPs, and coverage."""
    h, w = det_masks[0].shape if det_masks else (gt_masks[0].shape if gt_masks else (0, 0))

    def inter_area(a, b):
        count = 0
        for y in range(h):
            for x in range(w):
                if a[y, x] and b[y, x]:
                    count += 1
        return count

    def area(a):
        count = 0
        for y in range(h):
            for x in range(w):
                if a[y, x]:
                    count += 1
        return count

    tp = 0
    for d in det_masks:
        d_area = area(d)
        best = 0.0
        for g in gt_masks:
            inter = inter_area(d, g)
            if mode == MODE_OVERLAP:
                score = inter / d_area
            else:
                score = inter / (d_area + area(g) - inter)
            best = max(best, score)
        if best > accept:
            tp += 1
    covered = 0
    for g in gt_masks:
        g_area = area(g)
        best = 0.0
        for d in det_masks:
            inter = inter_area(d, g)
            if mode == MODE_OVERLAP:
                score = inter / g_area
            else:
                score = inter / (area(d) + g_area - inter)
            best = max(best, score)
        if best > accept:
            covered += 1
    p = tp / len(det_masks) if det_masks else 0.0
    r = covered / len(gt_masks) if gt_masks else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def rasterize_box(box, shape):
    mask = np.zeros(shape, dtype=bool)
    x0, y0, x1, y1 = box
    mask[max(y0, 0) : y1, max(x0, 0) : x1] = True
    return mask


# ---------------------------------------------------------------------------


class TestDetectRegions:
    def test_two_blobs(self):
        grid = np.zeros((6, 6))
        grid[0:2, 0:2] = 1.0
        grid[4:6, 4:6] = 0.9
        dets = detect_regions(grid, 0.5)
        assert len(dets) == 2

    def test_zero_threshold_covers_everything(self):
        grid = np.full((4, 5), 0.1)
        dets = detect_regions(grid, 0.0)
        assert len(dets) == 1
        assert dets.regions[0].area == 20
        assert dets.regions[0].box == (0, 0, 5, 4)

    def test_checkerboard_four_connectivity(self):
        grid = np.indices((5, 5)).sum(axis=0) % 2 == 0
        dets = detect_regions(grid.astype(float), 0.5, connectivity=4)
        oracle = flood_fill_components(grid, connectivity=4)
        assert len(dets) == len(oracle) == 13

    def test_checkerboard_eight_connectivity(self):
        grid = (np.indices((5, 5)).sum(axis=0) % 2 == 0).astype(float)
        dets = detect_regions(grid, 0.5, connectivity=8)
        oracle = flood_fill_components(grid > 0, connectivity=8)
        assert len(dets) == len(oracle) == 1

    def test_regions_partition_super_threshold_mask(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            grid = rng.random((rng.integers(2, 12), rng.integers(2, 12)))
            dets = detect_regions(grid, 0.5)
            union = np.zeros(grid.shape, dtype=int)
            for region in dets.regions:
                union += region.mask.astype(int)
            assert (union <= 1).all()
            assert np.array_equal(union.astype(bool), grid >= 0.5)

    def test_matches_flood_fill_on_random_grids(self):
        rng = np.random.default_rng(1)
        for conn in (4, 8):
            for _ in range(40):
                grid = (rng.random((rng.integers(2, 16), rng.integers(2, 16))) > 0.6)
                dets = detect_regions(grid.astype(float), 0.5, connectivity=conn)
                got = {frozenset(map(tuple, np.argwhere(r.mask))) for r in dets.regions}
                expected = set(flood_fill_components(grid, conn))
                assert got == expected


class TestMatchMetrics:
    def test_exact_match_gives_unit_scores(self):
        shape = (20, 20)
        box = (3, 4, 10, 12)
        gt = rasterize_box(box, shape)
        dets = detect_regions(gt.astype(float), 0.5)
        for mode in (MODE_OVERLAP, MODE_IOU):
            p, r, f1 = match_metrics(dets, [gt], mode)
            assert (p, r, f1) == (1.0, 1.0, 1.0)

    def test_known_iou_example(self):
        # det (0,0,10,10), gt (5,5,15,15): |I|=25, |U|=175, iou=1/7 -> no TP at 0.5
        shape = (20, 20)
        det_mask = rasterize_box((0, 0, 10, 10), shape)
        gt_mask = rasterize_box((5, 5, 15, 15), shape)
        dets = detect_regions(det_mask.astype(float), 0.5)
        match = build_match(dets, [gt_mask])
        assert match.inter[0, 0] == 25
        union = match.det_areas[0] + match.gt_areas[0] - match.inter[0, 0]
        assert union == 175
        assert match.inter[0, 0] / union == pytest.approx(1 / 7)
        p, r, f1 = match_metrics(dets, [gt_mask], MODE_IOU, accept=0.5)
        assert (p, r) == (0.0, 0.0)

    def test_published_f1_triples(self):
        # Answer- and question-grounding rows for the best-reported model.
        assert abs(100 * f1_score(0.1453, 0.8547) - 24.84) <= 0.01
        assert abs(100 * f1_score(0.4703, 0.8167) - 59.69) <= 0.01

    def test_empty_detections_report_zero_precision(self):
        dets = detect_regions(np.zeros((5, 5)), 0.5)
        assert len(dets) == 0
        p, r, f1 = match_metrics(dets, [rasterize_box((0, 0, 2, 2), (5, 5))],
                                 MODE_OVERLAP)
        assert p == 0.0 and f1 == 0.0

    def test_empty_gts_excluded_from_recall(self):
        acc = MetricAccumulator(MODE_OVERLAP, 0.5)
        full = rasterize_box((0, 0, 3, 3), (5, 5))
        dets = detect_regions(full.astype(float), 0.5)
        acc.add(build_match(dets, [full]))
        acc.add(build_match(dets, []))  # no gt: no recall denominator added
        p, r, f1 = acc.result()
        assert r == 1.0

    def test_agrees_with_pixel_oracle_randomized(self):
        rng = np.random.default_rng(42)
        for trial in range(60):
            h = int(rng.integers(4, 33))
            w = int(rng.integers(4, 33))
            grid = rng.random((h, w))
            dets = detect_regions(grid, float(rng.uniform(0.4, 0.8)))
            while len(dets) > 5:
                dets.regions.pop()
            gt_masks = []
            for _ in range(int(rng.integers(0, 6))):
                x0 = int(rng.integers(0, w - 1))
                y0 = int(rng.integers(0, h - 1))
                x1 = int(rng.integers(x0 + 1, w + 1))
                y1 = int(rng.integers(y0 + 1, h + 1))
                gt_masks.append(rasterize_box((x0, y0, x1, y1), (h, w)))
            accept = float(rng.choice([0.3, 0.5, 0.7]))
            det_masks = [r.mask for r in dets.regions]
            for mode in (MODE_OVERLAP, MODE_IOU):
                expected = pixel_count_oracle(det_masks, gt_masks, mode, accept)
                got = match_metrics(dets, gt_masks, mode, accept)
                assert got == pytest.approx(expected, abs=0)

    def test_macro_averaging(self):
        shape = (8, 8)
        g1 = rasterize_box((0, 0, 4, 4), shape)
        d1 = detect_regions(g1.astype(float), 0.5)
        g2 = rasterize_box((4, 4, 8, 8), shape)
        d2 = detect_regions(np.zeros(shape), 0.5)
        acc = MetricAccumulator(MODE_OVERLAP, 0.5, macro=True)
        acc.add(build_match(d1, [g1]))
        acc.add(build_match(d2, [g2]))
        p, r, f1 = acc.result()
        assert p == 1.0  # only the sample with detections enters the mean
        assert r == 0.5


class TestBoxRasterization:
    def test_aligned_box_covers_exact_cells(self):
        # 56px image on a 7x7 grid: cells are 8px; a box over cells 1..2 maps
        # to exactly those cells.
        mask = box_to_cell_mask((8, 8, 24, 24), (56, 56), (7, 7))
        expected = np.zeros((7, 7), dtype=bool)
        expected[1:3, 1:3] = True
        assert np.array_equal(mask, expected)

    def test_half_coverage_rule(self):
        # A box covering 4 of 8 pixel columns of a cell covers half its area.
        mask = box_to_cell_mask((0, 0, 12, 8), (56, 56), (7, 7))
        assert mask[0, 0] and mask[0, 1]
        assert not mask[0, 2]
        # Just under half: excluded.
        mask = box_to_cell_mask((0, 0, 11, 8), (56, 56), (7, 7))
        assert mask[0, 0] and not mask[0, 1]

    def test_grid_coords_proportional(self):
        box = box_to_grid_coords((14, 28, 42, 56), (56, 56), (7, 7))
        assert box == (1.75, 3.5, 5.25, 7.0)


class TestPointingGame:
    def test_single_head_inside_box(self):
        grid = np.zeros((8, 8))
        grid[5, 5] = 1.0
        assert pointing_game([grid], [(4, 4, 7, 7)]) == HIT

    def test_centroid_arithmetic(self):
        # Heads at (0,0) and (10,10); centroid (5,5) inside (4,4,7,7).
        g1 = np.zeros((11, 11))
        g1[0, 0] = 1.0
        g2 = np.zeros((11, 11))
        g2[10, 10] = 1.0
        assert pointing_game([g1, g2], [(4, 4, 7, 7)]) == HIT
        assert pointing_game([g1, g2], [(0, 0, 3, 3)]) == MISS

    def test_no_gt_boxes_skipped(self):
        grid = np.ones((4, 4))
        assert pointing_game([grid], []) == SKIPPED

    def test_argmax_tie_break_lowest_row_major(self):
        grid = np.ones((3, 3))
        assert argmax_cell(grid) == (0, 0)
        grid[1, 2] = 2.0
        grid[2, 1] = 2.0
        assert argmax_cell(grid) == (1, 2)

    def test_monotone_rescale_invariance(self):
        rng = np.random.default_rng(3)
        boxes = [(1.0, 1.0, 4.0, 4.0)]
        for _ in range(20):
            grids = [rng.random((6, 6)) for _ in range(4)]
            base = pointing_game(grids, boxes)
            rescaled = [np.exp(3 * g) + 1 for g in grids]
            assert pointing_game(rescaled, boxes) == base

    def test_half_open_boundary(self):
        grid = np.zeros((8, 8))
        grid[4, 4] = 1.0
        assert pointing_game([grid], [(4, 4, 5, 5)]) == HIT
        assert pointing_game([grid], [(3, 3, 4, 4)]) == MISS


class TestRankCorrelation:
    def test_self_correlation_exactly_one(self):
        rng = np.random.default_rng(0)
        grid = rng.random((14, 14))
        assert rank_correlation(grid, [grid]) == 1.0

    def test_reversed_exactly_minus_one(self):
        rng = np.random.default_rng(1)
        grid = rng.random((14, 14))  # continuous: no ties
        assert rank_correlation(grid, [grid.max() - grid]) == -1.0

    def test_matches_scipy(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            a = rng.random((14, 14))
            b = rng.random((14, 14))
            if rng.random() < 0.3:
                a = np.round(a, 1)  # introduce ties
            ours = spearman(a, b)
            ref = spearmanr(a.ravel(), b.ravel()).statistic
            assert ours == pytest.approx(ref, abs=1e-12)

    def test_symmetry_and_monotone_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.random((14, 14))
        b = rng.random((14, 14))
        assert spearman(a, b) == pytest.approx(spearman(b, a), abs=1e-15)
        assert spearman(np.exp(2 * a), b) == pytest.approx(spearman(a, b), abs=1e-12)

    def test_constant_map_is_zero_with_warning(self):
        with pytest.warns(UserWarning, match="constant"):
            assert spearman(np.ones((5, 5)), np.random.default_rng(0).random((5, 5))) == 0.0

    def test_mean_over_human_maps(self):
        rng = np.random.default_rng(4)
        sys = rng.random((14, 14))
        humans = [sys, sys.max() - sys]
        assert rank_correlation(sys, humans) == pytest.approx(0.0, abs=1e-12)

    def test_random_pairs_center_on_zero(self):
        rng = np.random.default_rng(5)
        vals = [
            spearman(rng.random((14, 14)), rng.random((14, 14))) for _ in range(400)
        ]
        assert abs(float(np.mean(vals))) < 0.02


class TestBilinearResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(0)
        grid = rng.random((7, 7))
        assert np.array_equal(bilinear_resize(grid, (7, 7)), grid)

    def test_constant_preserved(self):
        grid = np.full((7, 7), 0.37)
        out = bilinear_resize(grid, (14, 14))
        assert np.allclose(out, 0.37)

    def test_upsample_shape_and_range(self):
        rng = np.random.default_rng(1)
        grid = rng.random((7, 7))
        out = bilinear_resize(grid, (14, 14))
        assert out.shape == (14, 14)
        assert out.min() >= grid.min() - 1e-12
        assert out.max() <= grid.max() + 1e-12


class TestThresholdSweep:
    def _random_matches(self, rng, n):
        matches = []
        for _ in range(n):
            grid = rng.random((10, 10))
            dets = detect_regions(grid, 0.6)
            gts = [
                rasterize_box(
                    (rng.integers(0, 5), rng.integers(0, 5),
                     rng.integers(5, 11), rng.integers(5, 11)),
                    (10, 10),
                )
                for _ in range(rng.integers(1, 4))
            ]
            matches.append(build_match(dets, gts))
        return matches

    def test_nineteen_rows(self):
        rng = np.random.default_rng(0)
        rows = threshold_sweep(self._random_matches(rng, 5), MODE_OVERLAP)
        assert len(rows) == 19
        assert rows[0]["threshold"] == 0.05
        assert rows[-1]["threshold"] == 0.95

    def test_monotone_nonincreasing(self):
        rng = np.random.default_rng(1)
        matches = self._random_matches(rng, 20)
        for mode in (MODE_OVERLAP, MODE_IOU):
            rows = threshold_sweep(matches, mode)
            for prev, cur in zip(rows, rows[1:]):
                assert cur["precision"] <= prev["precision"] + 1e-12
                assert cur["recall"] <= prev["recall"] + 1e-12
            assert rows[0]["precision"] >= rows[-1]["precision"]
            assert rows[0]["recall"] >= rows[-1]["recall"]


class TestCapsuleGrouping:
    def test_argmax_assignment(self):
        vectors = np.array([[0.1, 0.9, 0.0], [0.5, 0.2, 0.3]])
        assert group_by_argmax(vectors) == [1, 0]

    def test_monotone_rescale_invariance(self):
        rng = np.random.default_rng(0)
        vectors = rng.random((10, 16))
        base = group_by_argmax(vectors)
        assert group_by_argmax(np.exp(5 * vectors)) == base

    def test_tie_break_lowest_index(self):
        assert group_by_argmax(np.array([[0.4, 0.4, 0.1]])) == [0]
