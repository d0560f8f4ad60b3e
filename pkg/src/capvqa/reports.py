"""Metrics report assembly and serialization (text + JSON + CSV tables)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path


def pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100.0 * x:.2f}"


@dataclass
class MetricsReport:
    """Grounding scores for one box target (answer or question objects)."""

    target: str
    overlap: tuple[float, float, float]
    iou: tuple[float, float, float]
    pointing_accuracy: float | None
    pointing_hits: int
    pointing_misses: int
    pointing_skipped: int
    n_samples: int
    n_detections: int
    n_gt_boxes: int
    detection_threshold: float
    accept_threshold: float
    layer: int
    head: int | str
    averaging: str = "micro"
    sweep_overlap: list[dict] | None = None
    sweep_iou: list[dict] | None = None
    per_head: list[dict] | None = None
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "target": self.target,
            "overlap": dict(zip(("precision", "recall", "f1"), self.overlap)),
            "iou": dict(zip(("precision", "recall", "f1"), self.iou)),
            "pointing_game": {
                "accuracy": self.pointing_accuracy,
                "hits": self.pointing_hits,
                "misses": self.pointing_misses,
                "skipped": self.pointing_skipped,
            },
            "counts": {
                "samples": self.n_samples,
                "detections": self.n_detections,
                "gt_boxes": self.n_gt_boxes,
            },
            "settings": {
                "detection_threshold": self.detection_threshold,
                "accept_threshold": self.accept_threshold,
                "layer": self.layer,
                "head": self.head,
                "averaging": self.averaging,
            },
        }
        if self.sweep_overlap is not None:
            out["sweep_overlap"] = self.sweep_overlap
        if self.sweep_iou is not None:
            out["sweep_iou"] = self.sweep_iou
        if self.per_head is not None:
            out["per_head"] = self.per_head
        out.update(self.extras)
        return out

    def to_text(self) -> str:
        lines = [
            f"grounding report: target={self.target} layer={self.layer} "
            f"head={self.head} ({self.averaging})",
            f"  samples={self.n_samples} detections={self.n_detections} "
            f"gt_boxes={self.n_gt_boxes}",
            f"  overlap  P={pct(self.overlap[0])} R={pct(self.overlap[1])} "
            f"F1={pct(self.overlap[2])}",
            f"  iou      P={pct(self.iou[0])} R={pct(self.iou[1])} "
            f"F1={pct(self.iou[2])}",
            f"  pointing game acc={pct(self.pointing_accuracy)} "
            f"(hits={self.pointing_hits} misses={self.pointing_misses} "
            f"skipped={self.pointing_skipped})",
        ]
        if self.per_head:
            lines.append("  per-head pointing/overlap-F1/iou-F1:")
            for row in self.per_head:
                lines.append(
                    f"    head {row['head']:>4}: pointing={pct(row['pointing_accuracy'])} "
                    f"overlapF1={pct(row['overlap'][2])} iouF1={pct(row['iou'][2])}"
                )
        return "\n".join(lines)


def write_report(report: MetricsReport, out_dir: str | Path, stem: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n"
    )
    (out / f"{stem}.txt").write_text(report.to_text() + "\n")
    for mode, rows in (("overlap", report.sweep_overlap), ("iou", report.sweep_iou)):
        if rows:
            write_table(rows, out / f"{stem}_sweep_{mode}.csv")
    if report.per_head:
        flat = [
            {
                "head": row["head"],
                "overlap_p": row["overlap"][0],
                "overlap_r": row["overlap"][1],
                "overlap_f1": row["overlap"][2],
                "iou_p": row["iou"][0],
                "iou_r": row["iou"][1],
                "iou_f1": row["iou"][2],
                "pointing_accuracy": row["pointing_accuracy"],
            }
            for row in report.per_head
        ]
        write_table(flat, out / f"{stem}_per_head.csv")


def write_table(rows: list[dict], path: str | Path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
