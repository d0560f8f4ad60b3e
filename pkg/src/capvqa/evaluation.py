"""Evaluation drivers: grounding metrics, rank correlation, capsule analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import pnm
from .attention import (
    AttentionMap,
    extract_attention,
    normalize_map,
    per_head_maps,
    render_heatmap,
    save_attention_map,
    write_heatmap,
)
from .data import AnswerVocab, Sample, iterate_batches
from .metrics import (
    HIT,
    MODE_IOU,
    MODE_OVERLAP,
    MetricAccumulator,
    PointingTally,
    SampleMatch,
    argmax_cell,
    box_to_cell_mask,
    box_to_grid_coords,
    build_match,
    detect_regions,
    pointing_game,
    rank_correlation,
    threshold_sweep,
)
from .model import GroundedVqaModel
from .reports import MetricsReport
from .tokenizer import Tokenizer


def sample_records(cross_records: list[dict], index: int) -> list[dict]:
    """Slice one sample's per-block attention records out of a batch."""
    out = []
    for block in cross_records:
        out.append(
            {name: scores[index].detach().cpu().numpy() for name, scores in block.items()}
        )
    return out


@dataclass
class EvalOptions:
    layer: int = -1
    head: int | str = "mean"
    detection_threshold: float = 0.5
    accept_threshold: float = 0.5
    connectivity: int = 4
    targets: tuple[str, ...] = ("answer",)
    sweep: bool = False
    per_head: bool = False
    macro: bool = False
    batch_size: int = 32
    heatmap_dir: Path | None = None
    heatmap_limit: int = 24
    dump_attention_dir: Path | None = None


@dataclass
class _TargetState:
    overlap: MetricAccumulator
    iou: MetricAccumulator
    pointing: PointingTally
    matches: list[SampleMatch]
    n_gt: int = 0
    per_head_overlap: list[MetricAccumulator] | None = None
    per_head_iou: list[MetricAccumulator] | None = None
    per_head_pointing: list[PointingTally] | None = None


@torch.no_grad()
def run_grounding_eval(
    model: GroundedVqaModel,
    samples: list[Sample],
    tokenizer: Tokenizer,
    answers: AnswerVocab,
    options: EvalOptions,
) -> tuple[dict[str, MetricsReport], float]:
    """Evaluate grounding for each requested box target.

    Returns (reports per target, answer accuracy).
    """
    model.eval()
    cfg = model.cfg
    grid_hw = (cfg.grid_h, cfg.grid_w)
    n_heads = cfg.heads

    states = {
        t: _TargetState(
            overlap=MetricAccumulator(MODE_OVERLAP, options.accept_threshold,
                                      options.macro),
            iou=MetricAccumulator(MODE_IOU, options.accept_threshold, options.macro),
            pointing=PointingTally(),
            matches=[],
        )
        for t in options.targets
    }
    if options.per_head:
        for st in states.values():
            st.per_head_overlap = [
                MetricAccumulator(MODE_OVERLAP, options.accept_threshold, options.macro)
                for _ in range(n_heads)
            ]
            st.per_head_iou = [
                MetricAccumulator(MODE_IOU, options.accept_threshold, options.macro)
                for _ in range(n_heads)
            ]
            st.per_head_pointing = [PointingTally() for _ in range(n_heads)]

    n_det_main = 0
    correct = 0
    heatmaps_written = 0

    for batch in iterate_batches(samples, tokenizer, answers, options.batch_size):
        out = model(
            batch.token_ids,
            batch.pad_mask,
            images=batch.images,
            feature_grids=batch.feature_grids,
            run_cross=True,
        )
        pred = model.vqa_head(out.pooled_stage2).argmax(dim=-1)
        correct += int((pred == batch.answer_ids).sum())

        for i, sample in enumerate(batch.samples):
            records = sample_records(out.cross.records, i)
            head_maps = per_head_maps(records, grid_hw, options.layer)
            main_map = extract_attention(records, grid_hw, options.layer, options.head)
            norm = normalize_map(main_map)
            dets = detect_regions(
                norm.grid, options.detection_threshold, options.connectivity
            )
            n_det_main += len(dets)
            head_dets = None
            if options.per_head:
                head_dets = [
                    detect_regions(
                        normalize_map(m).grid,
                        options.detection_threshold,
                        options.connectivity,
                    )
                    for m in head_maps
                ]

            if options.dump_attention_dir is not None:
                options.dump_attention_dir.mkdir(parents=True, exist_ok=True)
                save_attention_map(
                    options.dump_attention_dir / f"{sample.sample_id}", main_map
                )

            points = np.array(
                [argmax_cell(m.grid) for m in head_maps], dtype=float
            )
            centroid = points.mean(axis=0)

            for target, st in states.items():
                boxes_px = sample.boxes(target)
                gt_masks = [
                    box_to_cell_mask(b, sample.image_size, grid_hw) for b in boxes_px
                ]
                gt_grid_boxes = [
                    box_to_grid_coords(b, sample.image_size, grid_hw) for b in boxes_px
                ]
                st.n_gt += len(boxes_px)
                match = build_match(dets, gt_masks)
                st.matches.append(match)
                st.overlap.add(match)
                st.iou.add(match)
                st.pointing.add(
                    pointing_game([m.grid for m in head_maps], gt_grid_boxes)
                )
                if options.per_head:
                    for k in range(n_heads):
                        hmatch = build_match(head_dets[k], gt_masks)
                        st.per_head_overlap[k].add(hmatch)
                        st.per_head_iou[k].add(hmatch)
                        st.per_head_pointing[k].add(
                            pointing_game([head_maps[k].grid], gt_grid_boxes)
                        )

            if (
                options.heatmap_dir is not None
                and heatmaps_written < options.heatmap_limit
            ):
                options.heatmap_dir.mkdir(parents=True, exist_ok=True)
                target = options.targets[0]
                grid_boxes = [
                    box_to_grid_coords(b, sample.image_size, grid_hw)
                    for b in sample.boxes(target)
                ]
                image = render_heatmap(
                    norm,
                    out_size=sample.image_size[0],
                    gt_boxes_px=sample.boxes(target),
                    det_boxes_grid=[r.box for r in dets.regions],
                    point_grid=(float(centroid[0]), float(centroid[1])),
                )
                write_heatmap(
                    options.heatmap_dir / f"{sample.sample_id}.ppm", image
                )
                heatmaps_written += 1

    reports = {}
    for target, st in states.items():
        per_head_rows = None
        if options.per_head:
            per_head_rows = [
                {
                    "head": k,
                    "overlap": st.per_head_overlap[k].result(),
                    "iou": st.per_head_iou[k].result(),
                    "pointing_accuracy": st.per_head_pointing[k].accuracy,
                }
                for k in range(n_heads)
            ]
            per_head_rows.append(
                {
                    "head": "cluster",
                    "overlap": st.overlap.result(),
                    "iou": st.iou.result(),
                    "pointing_accuracy": st.pointing.accuracy,
                }
            )
        reports[target] = MetricsReport(
            target=target,
            overlap=st.overlap.result(),
            iou=st.iou.result(),
            pointing_accuracy=st.pointing.accuracy,
            pointing_hits=st.pointing.hits,
            pointing_misses=st.pointing.misses,
            pointing_skipped=st.pointing.skipped,
            n_samples=len(samples),
            n_detections=n_det_main,
            n_gt_boxes=st.n_gt,
            detection_threshold=options.detection_threshold,
            accept_threshold=options.accept_threshold,
            layer=options.layer,
            head=options.head,
            averaging="macro" if options.macro else "micro",
            sweep_overlap=(
                threshold_sweep(st.matches, MODE_OVERLAP, macro=options.macro)
                if options.sweep
                else None
            ),
            sweep_iou=(
                threshold_sweep(st.matches, MODE_IOU, macro=options.macro)
                if options.sweep
                else None
            ),
            per_head=per_head_rows,
        )
    accuracy = correct / max(len(samples), 1)
    return reports, accuracy


def load_human_map(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    return pnm.read_pgm(path).astype(np.float64)


@torch.no_grad()
def run_hat_eval(
    model: GroundedVqaModel,
    samples: list[Sample],
    tokenizer: Tokenizer,
    answers: AnswerVocab,
    options: EvalOptions,
) -> tuple[float, float, list[dict]]:
    """Mean rank correlation between system and human attention maps.

    Returns (mean, std over samples, per-sample breakdown rows).
    """
    missing = [s.sample_id for s in samples if not s.human_map_paths]
    if missing:
        raise ValueError(
            f"samples missing human attention maps: {missing[:10]}"
            + ("..." if len(missing) > 10 else "")
        )
    model.eval()
    grid_hw = (model.cfg.grid_h, model.cfg.grid_w)
    rows = []
    for batch in iterate_batches(samples, tokenizer, answers, options.batch_size):
        out = model(
            batch.token_ids,
            batch.pad_mask,
            images=batch.images,
            feature_grids=batch.feature_grids,
            run_cross=True,
        )
        for i, sample in enumerate(batch.samples):
            records = sample_records(out.cross.records, i)
            amap = extract_attention(records, grid_hw, options.layer, options.head)
            human = [load_human_map(p) for p in sample.human_map_paths]
            score = rank_correlation(amap.grid, human)
            rows.append(
                {
                    "sample_id": sample.sample_id,
                    "rank_correlation": score,
                    "n_human_maps": len(human),
                }
            )
    scores = np.array([r["rank_correlation"] for r in rows])
    return float(scores.mean()), float(scores.std()), rows


@torch.no_grad()
def run_capsule_summary(
    model: GroundedVqaModel,
    samples: list[Sample],
    tokenizer: Tokenizer,
    answers: AnswerVocab,
    batch_size: int = 32,
) -> tuple[np.ndarray, list[str]]:
    """Per-image capsule activation vectors (mean over cells): (N, C)."""
    model.eval()
    vectors = []
    ids = []
    for batch in iterate_batches(samples, tokenizer, answers, batch_size):
        embedding = model.embed_image(batch.images, batch.feature_grids)
        grid = model.capsule_grid(embedding)
        acts = grid.activations.squeeze(-1)  # (B, h, w, C)
        vectors.append(acts.mean(dim=(1, 2)).cpu().numpy())
        ids.extend(s.sample_id for s in batch.samples)
    return np.concatenate(vectors, axis=0), ids


def write_capsule_groups(
    out_dir: Path, vectors: np.ndarray, sample_ids: list[str]
) -> dict:
    """Group images by their highest-activated capsule and export listings."""
    from .metrics import group_by_argmax

    out_dir.mkdir(parents=True, exist_ok=True)
    assignments = group_by_argmax(vectors)
    n_caps = vectors.shape[1]
    groups: dict[int, list[str]] = {c: [] for c in range(n_caps)}
    for sid, cap in zip(sample_ids, assignments):
        groups[cap].append(sid)
    with open(out_dir / "capsule_vectors.jsonl", "w") as f:
        for sid, vec, cap in zip(sample_ids, vectors, assignments):
            f.write(
                json.dumps(
                    {
                        "sample_id": sid,
                        "activations": [float(v) for v in vec],
                        "group": int(cap),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    for cap, members in groups.items():
        if members:
            (out_dir / f"group_{cap:02d}.txt").write_text("\n".join(members) + "\n")
    summary = {
        "n_images": len(sample_ids),
        "n_capsules": n_caps,
        "group_sizes": {str(c): len(m) for c, m in groups.items()},
    }
    (out_dir / "groups.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
