"""Attention extraction, normalization, and export."""

import numpy as np
import pytest

from capvqa.attention import (
    AttentionMap,
    extract_attention,
    load_attention_map,
    normalize_map,
    per_head_maps,
    render_heatmap,
    save_attention_map,
)


def make_records(n_layers=2, heads=12, h=7, w=7, seed=0):
    rng = np.random.default_rng(seed)
    s = h * w + 1
    records = []
    for _ in range(n_layers):
        raw = rng.random((heads, s, s))
        probs = raw / raw.sum(axis=-1, keepdims=True)
        records.append({"vision_self": probs})
    return records


class TestExtract:
    def test_mean_is_mean_of_heads(self):
        records = make_records()
        per_head = per_head_maps(records, (7, 7), layer=-1)
        assert len(per_head) == 12
        mean_map = extract_attention(records, (7, 7), layer=-1, head="mean")
        stacked = np.stack([m.grid for m in per_head])
        assert np.allclose(mean_map.grid, stacked.mean(axis=0), atol=1e-12)

    def test_uniform_attention_over_tokens(self):
        # [IMG] row uniform over the 49 non-self tokens -> constant 1/49 map.
        s = 50
        probs = np.zeros((1, s, s))
        probs[:, 0, 1:] = 1.0 / 49
        records = [{"vision_self": probs}]
        amap = extract_attention(records, (7, 7), head=0)
        assert np.allclose(amap.grid, 1.0 / 49)

    def test_img_self_score_dropped_and_row_major(self):
        s = 5  # 2x2 grid + [IMG]
        probs = np.zeros((1, s, s))
        probs[0, 0] = [0.5, 0.1, 0.2, 0.3, 0.4]
        records = [{"vision_self": probs}]
        amap = extract_attention(records, (2, 2), head=0)
        assert np.array_equal(amap.grid, [[0.1, 0.2], [0.3, 0.4]])

    def test_layer_and_head_out_of_range(self):
        records = make_records(n_layers=2, heads=4)
        with pytest.raises(IndexError, match="layer"):
            extract_attention(records, (7, 7), layer=2)
        with pytest.raises(IndexError, match="head"):
            extract_attention(records, (7, 7), head=4)

    def test_negative_layer_indexes_from_end(self):
        records = make_records(n_layers=3, heads=2)
        last = extract_attention(records, (7, 7), layer=-1, head=0)
        explicit = extract_attention(records, (7, 7), layer=2, head=0)
        assert np.array_equal(last.grid, explicit.grid)


class TestNormalize:
    def test_small_max_rescaled_to_one(self):
        amap = AttentionMap(np.full((3, 3), 0.02), layer=0, head=0)
        out = normalize_map(amap)
        assert out.grid.max() == 1.0

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        amap = AttentionMap(rng.random((4, 4)), layer=0, head=0)
        once = normalize_map(amap)
        twice = normalize_map(once)
        assert np.array_equal(once.grid, twice.grid)

    def test_all_zero_unchanged(self):
        amap = AttentionMap(np.zeros((3, 3)), layer=0, head="mean")
        out = normalize_map(amap)
        assert np.array_equal(out.grid, np.zeros((3, 3)))


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    amap = AttentionMap(rng.random((7, 7)), layer=1, head="mean")
    save_attention_map(tmp_path / "att", amap)
    loaded = load_attention_map(tmp_path / "att")
    assert np.array_equal(loaded.grid, amap.grid)
    assert loaded.layer == 1 and loaded.head == "mean"


def test_render_heatmap_overlay():
    rng = np.random.default_rng(2)
    amap = AttentionMap(rng.random((7, 7)), layer=0, head="mean")
    image = render_heatmap(
        amap, out_size=56, gt_boxes_px=[(8, 8, 24, 24)],
        det_boxes_grid=[(4, 4, 6, 6)], point_grid=(3.0, 3.0),
    )
    assert image.shape == (56, 56, 3)
    assert image.dtype == np.uint8
    # Overlay colors present.
    assert (image == (60, 120, 255)).all(axis=-1).any()
    assert (image == (255, 160, 40)).all(axis=-1).any()
    assert (image == (80, 255, 80)).all(axis=-1).any()
