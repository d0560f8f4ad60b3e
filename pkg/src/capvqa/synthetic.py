"""Synthetic shapes-VQA dataset generator with exact ground-truth boxes.

Scenes are non-overlapping colored shapes on a dark canvas.  Questions are
unambiguous by construction ("what color is the circle" is only asked when
the scene has exactly one circle), so a rule oracle over the scene record
can recover every stored answer.  Boxes are pixel-tight around the rendered
shape masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 235),
    "yellow": (235, 220, 40),
    "magenta": (225, 50, 215),
    "cyan": (45, 215, 225),
}
BACKGROUND = 24


class GenerationError(RuntimeError):
    """Scene construction failed (e.g. unsatisfiable placement)."""


@dataclass
class SyntheticSpec:
    image_size: int = 56
    grid_h: int = 7
    grid_w: int = 7
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    objects_min: int = 1
    objects_max: int = 2
    size_min: int = 16
    size_max: int = 26
    n_samples: int = 2000
    val_fraction: float = 0.1
    seed: int = 7
    human_maps: bool = False

    def validate(self) -> None:
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise GenerationError("objects range must satisfy 1 <= min <= max")
        if self.size_min < 3 or self.size_max < self.size_min:
            raise GenerationError("size range must satisfy 3 <= min <= max")
        if self.size_max > self.image_size:
            raise GenerationError("object size exceeds the canvas")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise GenerationError(f"unknown shape(s): {sorted(unknown)}")
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise GenerationError(f"unknown color(s): {sorted(unknown)}")

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticSpec":
        data = json.loads(Path(path).read_text())
        for key in ("shapes", "colors"):
            if key in data:
                data[key] = tuple(data[key])
        spec = cls(**data)
        spec.validate()
        return spec


def answer_vocabulary(spec: SyntheticSpec) -> list[str]:
    return list(spec.colors) + list(spec.shapes) + ["yes", "no"]


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) mask of the filled shape."""
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        c = (size - 1) / 2.0
        r = size / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= r * r - 0.5
    if shape == "triangle":
        # Upward triangle: full base at the bottom row, apex centered on top.
        frac = (yy + 1) / size
        c = (size - 1) / 2.0
        return np.abs(xx - c) <= frac * size / 2.0 - 0.25
    if shape == "cross":
        arm = max(size // 3, 2)
        lo = (size - arm) // 2
        hi = lo + arm
        mask = np.zeros((size, size), dtype=bool)
        mask[lo:hi, :] = True
        mask[:, lo:hi] = True
        return mask
    raise GenerationError(f"unknown shape {shape!r}")


def tight_box(mask: np.ndarray, x_off: int, y_off: int) -> tuple[int, int, int, int]:
    """Half-open pixel box around the true pixels of mask placed at (x_off, y_off)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise GenerationError("shape rasterized to an empty mask")
    return (
        x_off + int(cols[0]),
        y_off + int(rows[0]),
        x_off + int(cols[-1]) + 1,
        y_off + int(rows[-1]) + 1,
    )


def _boxes_overlap(a, b, gap: int = 1) -> bool:
    return not (
        a[2] + gap <= b[0]
        or b[2] + gap <= a[0]
        or a[3] + gap <= b[1]
        or b[3] + gap <= a[1]
    )


def _try_scene(spec: SyntheticSpec, rng: np.random.Generator, n_objects: int) -> dict | None:
    image = np.full((spec.image_size, spec.image_size, 3), BACKGROUND, dtype=np.uint8)
    objects = []
    boxes = []
    for _ in range(n_objects):
        placed = False
        for _ in range(50):
            size = int(rng.integers(spec.size_min, spec.size_max + 1))
            shape = str(rng.choice(spec.shapes))
            color = str(rng.choice(spec.colors))
            x = int(rng.integers(0, spec.image_size - size + 1))
            y = int(rng.integers(0, spec.image_size - size + 1))
            mask = shape_mask(shape, size)
            box = tight_box(mask, x, y)
            if any(_boxes_overlap(box, other) for other in boxes):
                continue
            image[y : y + size, x : x + size][mask] = COLORS[color]
            objects.append({"shape": shape, "color": color, "box": list(box)})
            boxes.append(box)
            placed = True
            break
        if not placed:
            return None
    return {"image": image, "objects": objects}


def sample_scene(spec: SyntheticSpec, rng: np.random.Generator) -> dict:
    """One scene: rendered image plus the object records."""
    n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(20):
        scene = _try_scene(spec, rng, n_objects)
        if scene is not None:
            return scene
    raise GenerationError(
        f"could not place {n_objects} non-overlapping objects of size "
        f"{spec.size_min}..{spec.size_max} on a {spec.image_size}px canvas"
    )


def answer_from_scene(objects: list[dict], question: str) -> str | None:
    """Rule oracle: recover the answer from the scene record alone."""
    words = question.split()
    if question.startswith("what color is the "):
        shape = words[-1]
        matches = [o for o in objects if o["shape"] == shape]
        return matches[0]["color"] if len(matches) == 1 else None
    if question.startswith("what shape is "):
        color = words[-1]
        matches = [o for o in objects if o["color"] == color]
        return matches[0]["shape"] if len(matches) == 1 else None
    if question.startswith("is there a "):
        color, shape = words[3], words[4]
        present = any(o["color"] == color and o["shape"] == shape for o in objects)
        return "yes" if present else "no"
    return None


def _question_boxes(objects: list[dict], shape: str | None, color: str | None) -> list:
    """Boxes of every object sharing a mentioned attribute."""
    out = []
    for o in objects:
        if (shape is not None and o["shape"] == shape) or (
            color is not None and o["color"] == color
        ):
            out.append(list(o["box"]))
    return out


def make_question(
    spec: SyntheticSpec, objects: list[dict], rng: np.random.Generator
) -> dict:
    """Pick one valid question for the scene with its answer and boxes."""
    shape_counts: dict[str, list[dict]] = {}
    color_counts: dict[str, list[dict]] = {}
    for o in objects:
        shape_counts.setdefault(o["shape"], []).append(o)
        color_counts.setdefault(o["color"], []).append(o)

    candidates = []
    for shape, objs in sorted(shape_counts.items()):
        if len(objs) == 1:
            candidates.append(("color_of", shape))
    for color, objs in sorted(color_counts.items()):
        if len(objs) == 1:
            candidates.append(("shape_of", color))
    candidates.append(("exists", None))

    kind, arg = candidates[int(rng.integers(0, len(candidates)))]
    if kind == "color_of":
        obj = shape_counts[arg][0]
        return {
            "question": f"what color is the {arg}",
            "answer": obj["color"],
            "answer_boxes": [list(obj["box"])],
            "question_boxes": _question_boxes(objects, shape=arg, color=None),
        }
    if kind == "shape_of":
        obj = color_counts[arg][0]
        return {
            "question": f"what shape is {arg}",
            "answer": obj["shape"],
            "answer_boxes": [list(obj["box"])],
            "question_boxes": _question_boxes(objects, shape=None, color=arg),
        }
    # Existence question, balanced between yes and no.
    if rng.random() < 0.5 and objects:
        obj = objects[int(rng.integers(0, len(objects)))]
        color, shape = obj["color"], obj["shape"]
    else:
        absent = [
            (c, s)
            for c in spec.colors
            for s in spec.shapes
            if not any(o["color"] == c and o["shape"] == s for o in objects)
        ]
        if absent:
            color, shape = absent[int(rng.integers(0, len(absent)))]
        else:
            obj = objects[int(rng.integers(0, len(objects)))]
            color, shape = obj["color"], obj["shape"]
    present = [o for o in objects if o["color"] == color and o["shape"] == shape]
    return {
        "question": f"is there a {color} {shape}",
        "answer": "yes" if present else "no",
        "answer_boxes": [list(o["box"]) for o in present],
        "question_boxes": _question_boxes(objects, shape=shape, color=color),
    }


def _human_map(box: list | None, size: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic stand-in for a human attention map: a blob over the box."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if box is None:
        cx = cy = (size - 1) / 2.0
        sigma = size / 3.0
    else:
        # Box is in image pixels; this map uses the same resolution.
        cx = (box[0] + box[2]) / 2.0 + rng.normal(0, 1.0)
        cy = (box[1] + box[3]) / 2.0 + rng.normal(0, 1.0)
        sigma = max(box[2] - box[0], box[3] - box[1]) * (0.45 + 0.15 * rng.random())
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    return np.round(blob / blob.max() * 255).astype(np.uint8)


def generate_dataset(spec: SyntheticSpec, out_dir: str | Path) -> dict:
    """Write images, manifests, vocabularies, and scene records.

    Returns summary stats. Deterministic given spec.seed: two runs produce
    byte-identical manifests.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if spec.human_maps:
        (out / "human_maps").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    records = []
    scenes = []
    questions = []
    for idx in range(spec.n_samples):
        sample_id = f"s{idx:06d}"
        scene = sample_scene(spec, rng)
        qa = make_question(spec, scene["objects"], rng)
        image_rel = f"images/{sample_id}.ppm"
        pnm.write_ppm(out / image_rel, scene["image"])
        record = {
            "sample_id": sample_id,
            "image": image_rel,
            "question": qa["question"],
            "answer": qa["answer"],
            "answer_boxes": qa["answer_boxes"],
            "question_boxes": qa["question_boxes"],
            "image_size": [spec.image_size, spec.image_size],
        }
        if spec.human_maps:
            paths = []
            box = qa["answer_boxes"][0] if qa["answer_boxes"] else None
            for m in range(3):
                rel = f"human_maps/{sample_id}_{m}.pgm"
                pnm.write_pgm(out / rel, _human_map(box, spec.image_size, rng))
                paths.append(rel)
            record["human_maps"] = paths
        records.append(record)
        scenes.append({"sample_id": sample_id, "objects": scene["objects"]})
        questions.append(qa["question"])

    n_val = int(round(spec.n_samples * spec.val_fraction))
    val_ids = set(
        rng.choice(spec.n_samples, size=n_val, replace=False).tolist()
    )
    train = [r for i, r in enumerate(records) if i not in val_ids]
    val = [r for i, r in enumerate(records) if i in val_ids]

    def dump(path: Path, rows: list[dict]) -> None:
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")

    dump(out / "manifest_train.jsonl", train)
    dump(out / "manifest_val.jsonl", val)
    dump(out / "scenes.jsonl", scenes)
    (out / "answers.txt").write_text("\n".join(answer_vocabulary(spec)) + "\n")

    from .tokenizer import Tokenizer

    Tokenizer.build(questions).save(out / "vocab.txt")

    stats = {
        "n_samples": spec.n_samples,
        "n_train": len(train),
        "n_val": len(val),
        "image_size": spec.image_size,
        "grid": [spec.grid_h, spec.grid_w],
        "answers": answer_vocabulary(spec),
    }
    (out / "dataset.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats
