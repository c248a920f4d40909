"""Dataset ingestion: the one-record-per-image JSONL schema and image loading.

Record layout:
    {"image_id": ..., "image_path": ..., "boxes": [[x1,y1,x2,y2], ...],
     "confidences": [...],
     "captions": [{"text": ..., "tokens": [...], "pos": [...]}, ...],
     "grounding": [{"caption_idx": i, "token_span": [a, b], "box_indices": [...]}]}

Boxes are absolute pixels; captions arrive tokenized and POS-tagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .encoding import RegionSet


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class CaptionEntry:
    text: str
    tokens: tuple[str, ...]
    pos: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.pos):
            raise SchemaError("tokens and pos must have equal length")
        if len(self.tokens) == 0:
            raise SchemaError("caption has no tokens")


@dataclass(frozen=True)
class GroundingEntry:
    caption_idx: int
    token_span: tuple[int, int]
    box_indices: tuple[int, ...]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image_path: str
    boxes: tuple[tuple[float, float, float, float], ...]
    confidences: tuple[float, ...]
    captions: tuple[CaptionEntry, ...]
    grounding: tuple[GroundingEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.boxes) != len(self.confidences):
            raise SchemaError("boxes and confidences must have equal length")
        for g in self.grounding:
            if not (0 <= g.caption_idx < len(self.captions)):
                raise SchemaError(f"grounding caption_idx {g.caption_idx} out of range")
            n = len(self.captions[g.caption_idx].tokens)
            a, b = g.token_span
            if not (0 <= a < b <= n):
                raise SchemaError(f"grounding span {g.token_span} outside caption of length {n}")
            for k in g.box_indices:
                if not (0 <= k < len(self.boxes)):
                    raise SchemaError(f"grounding box index {k} out of range")

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "boxes": [list(b) for b in self.boxes],
            "confidences": list(self.confidences),
            "captions": [{"text": c.text, "tokens": list(c.tokens), "pos": list(c.pos)}
                         for c in self.captions],
            "grounding": [{"caption_idx": g.caption_idx, "token_span": list(g.token_span),
                           "box_indices": list(g.box_indices)} for g in self.grounding],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ImageRecord":
        try:
            captions = tuple(CaptionEntry(text=c.get("text", " ".join(c["tokens"])),
                                          tokens=tuple(c["tokens"]), pos=tuple(c["pos"]))
                             for c in d["captions"])
            grounding = tuple(GroundingEntry(caption_idx=int(g["caption_idx"]),
                                             token_span=tuple(g["token_span"]),
                                             box_indices=tuple(g["box_indices"]))
                              for g in d.get("grounding", []))
            return cls(image_id=str(d["image_id"]), image_path=str(d["image_path"]),
                       boxes=tuple(tuple(float(v) for v in b) for b in d["boxes"]),
                       confidences=tuple(float(c) for c in d["confidences"]),
                       captions=captions, grounding=grounding)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad record for image_id={d.get('image_id')!r}: {exc}") from exc


def write_jsonl(rows: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_corpus(path: str | Path) -> list[ImageRecord]:
    return [ImageRecord.from_json_dict(d) for d in read_jsonl(path)]


def write_corpus(records: Iterable[ImageRecord], path: str | Path) -> Path:
    return write_jsonl((r.to_json_dict() for r in records), path)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def record_region_set(record: ImageRecord, image: np.ndarray) -> RegionSet:
    h, w = image.shape[:2]
    return RegionSet(boxes=record.boxes, confidences=record.confidences, image_size=(w, h))
