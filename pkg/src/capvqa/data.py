"""Dataset loading: manifest parsing, validation, and deterministic batching."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import pnm
from .tokenizer import Tokenizer


class ManifestError(ValueError):
    """Manifest record violates the schema."""


@dataclass
class Sample:
    sample_id: str
    question: str
    answer: str
    answer_boxes: list[list[int]]
    question_boxes: list[list[int]]
    image_size: tuple[int, int]
    image_path: Path | None = None
    features_path: Path | None = None
    human_map_paths: list[Path] | None = None

    def boxes(self, target: str) -> list[list[int]]:
        if target == "answer":
            return self.answer_boxes
        if target == "question":
            return self.question_boxes
        raise ValueError(f"unknown box target {target!r}")


_REQUIRED = ("sample_id", "question", "answer", "answer_boxes", "question_boxes",
             "image_size")


def _check_boxes(boxes, image_size, sample_id: str, field_name: str) -> list[list[int]]:
    w, h = image_size
    out = []
    for box in boxes:
        if len(box) != 4:
            raise ManifestError(
                f"sample {sample_id}: field {field_name!r} box must have 4 coords"
            )
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            raise ManifestError(
                f"sample {sample_id}: field {field_name!r} box {box} has no area"
            )
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise ManifestError(
                f"sample {sample_id}: field {field_name!r} box {box} outside image "
                f"bounds {image_size}"
            )
        out.append([int(v) for v in box])
    return out


def load_manifest(path: str | Path) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    samples = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        for fld in _REQUIRED:
            if fld not in rec:
                raise ManifestError(f"{path}:{line_no}: missing field {fld!r}")
        sid = str(rec["sample_id"])
        image_size = tuple(rec["image_size"])
        if len(image_size) != 2 or min(image_size) < 1:
            raise ManifestError(f"sample {sid}: field 'image_size' invalid: {image_size}")
        if "image" not in rec and "features" not in rec:
            raise ManifestError(
                f"sample {sid}: missing field 'image' (or 'features')"
            )
        samples.append(
            Sample(
                sample_id=sid,
                question=str(rec["question"]),
                answer=str(rec["answer"]),
                answer_boxes=_check_boxes(rec["answer_boxes"], image_size, sid,
                                          "answer_boxes"),
                question_boxes=_check_boxes(rec["question_boxes"], image_size, sid,
                                            "question_boxes"),
                image_size=image_size,
                image_path=root / rec["image"] if "image" in rec else None,
                features_path=root / rec["features"] if "features" in rec else None,
                human_map_paths=[root / p for p in rec["human_maps"]]
                if "human_maps" in rec
                else None,
            )
        )
    return samples


class AnswerVocab:
    def __init__(self, answers: list[str]):
        self.answers = list(answers)
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    @classmethod
    def load(cls, path: str | Path) -> "AnswerVocab":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])

    def id_of(self, answer: str) -> int:
        if answer not in self.index:
            raise ManifestError(f"answer {answer!r} not in the answer vocabulary")
        return self.index[answer]


@dataclass
class Batch:
    samples: list[Sample]
    images: torch.Tensor | None
    feature_grids: torch.Tensor | None
    token_ids: torch.Tensor
    pad_mask: torch.Tensor
    answer_ids: torch.Tensor

    def __len__(self) -> int:
        return len(self.samples)


@lru_cache(maxsize=8192)
def _cached_image(path: str) -> torch.Tensor:
    img = pnm.read_ppm(path).astype(np.float32) / 255.0
    return torch.from_numpy(img).permute(2, 0, 1)


def load_image_tensor(sample: Sample) -> torch.Tensor:
    # Cached: callers stack into fresh batch tensors and never mutate.
    return _cached_image(str(sample.image_path))


def make_batch(
    samples: list[Sample], tokenizer: Tokenizer, answers: AnswerVocab
) -> Batch:
    encoded = [tokenizer.encode(s.question) for s in samples]
    max_len = max(len(e) for e in encoded)
    token_ids = torch.full((len(samples), max_len), tokenizer.pad_id, dtype=torch.long)
    pad_mask = torch.zeros(len(samples), max_len, dtype=torch.bool)
    for i, ids in enumerate(encoded):
        token_ids[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        pad_mask[i, : len(ids)] = True
    answer_ids = torch.tensor([answers.id_of(s.answer) for s in samples])
    if samples[0].features_path is not None:
        grids = torch.stack(
            [torch.from_numpy(np.load(s.features_path)).float() for s in samples]
        )
        images = None
    else:
        grids = None
        images = torch.stack([load_image_tensor(s) for s in samples])
    return Batch(
        samples=samples,
        images=images,
        feature_grids=grids,
        token_ids=token_ids,
        pad_mask=pad_mask,
        answer_ids=answer_ids,
    )


def iterate_batches(
    samples: list[Sample],
    tokenizer: Tokenizer,
    answers: AnswerVocab,
    batch_size: int,
    rng: np.random.Generator | None = None,
):
    """Yield batches in manifest order, or shuffled when an rng is given."""
    order = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield make_batch(chunk, tokenizer, answers)


@dataclass
class DatasetPaths:
    """Standard layout written by the generator."""

    root: Path

    @property
    def train_manifest(self) -> Path:
        return self.root / "manifest_train.jsonl"

    @property
    def val_manifest(self) -> Path:
        return self.root / "manifest_val.jsonl"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.txt"

    @property
    def answers(self) -> Path:
        return self.root / "answers.txt"


def open_dataset(root: str | Path) -> tuple[DatasetPaths, Tokenizer, AnswerVocab]:
    paths = DatasetPaths(Path(root))
    for p in (paths.train_manifest, paths.vocab, paths.answers):
        if not p.exists():
            raise ManifestError(f"dataset file missing: {p}")
    return paths, Tokenizer.load(paths.vocab), AnswerVocab.load(paths.answers)
