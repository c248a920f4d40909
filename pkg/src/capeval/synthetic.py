"""Desk-scale synthetic corpus: solid-color object patches on a grid.

Each image places a handful of known concepts (one solid-color patch per
concept, aligned to the synthetic backbone's tile grid); captions mention
concept subsets of varying size with filler words in between, and every
concept word is grounded to its region. The generator also produces clean
held-out evaluation material: polluted captions whose replacement word is
guaranteed absent from the image, and same-image caption siblings with
strictly different semantic richness.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import CaptionEntry, GroundingEntry, ImageRecord, write_corpus

DEFAULT_CONCEPTS = ("dog", "cat", "tree", "car", "house", "ball",
                    "bird", "fish", "lamp", "shoe", "book", "cup")
FILLER = ("a", "DET")
JOINER = ("and", "CCONJ")
BACKGROUND = (228, 228, 228)


@dataclass
class ToyWorldConfig:
    n_images: int = 200
    captions_per_image: int = 4
    grid: int = 3
    cell: int = 32            # pixels per cell; keep a multiple of the backbone tile
    min_objects: int = 4
    max_objects: int = 7
    min_mentions: int = 2
    seed: int = 0
    concepts: tuple[str, ...] = DEFAULT_CONCEPTS

    def __post_init__(self):
        if self.max_objects > self.grid * self.grid:
            raise ValueError("more objects than grid cells")
        if self.min_mentions < 1 or self.min_objects < self.min_mentions + 1:
            raise ValueError("need room for captions poorer than the full one")

    @property
    def image_size(self) -> int:
        return self.grid * self.cell


def concept_palette(concepts: tuple[str, ...]) -> dict[str, tuple[int, int, int]]:
    palette = {}
    for i, name in enumerate(concepts):
        r, g, b = colorsys.hsv_to_rgb(i / len(concepts), 0.75, 0.85)
        palette[name] = (int(r * 255), int(g * 255), int(b * 255))
    return palette


@dataclass
class ToyWorld:
    config: ToyWorldConfig
    records: list[ImageRecord]
    # image_id -> (concept -> region index); region order matches record.boxes
    placements: dict[str, dict[str, int]]
    root: Path | None = None

    @property
    def corpus_path(self) -> Path:
        return self.root / "corpus.jsonl"

    def split(self, train_fraction: float = 0.8) -> tuple[list[ImageRecord], list[ImageRecord]]:
        cut = int(round(len(self.records) * train_fraction))
        return self.records[:cut], self.records[cut:]


def _caption_tokens(concepts: list[str]) -> tuple[list[str], list[str]]:
    tokens, pos = [], []
    for i, c in enumerate(concepts):
        if i > 0:
            tokens.append(JOINER[0])
            pos.append(JOINER[1])
        tokens.append(FILLER[0])
        pos.append(FILLER[1])
        tokens.append(c)
        pos.append("NOUN")
    return tokens, pos


def generate_toy_world(cfg: ToyWorldConfig, out_dir: str | Path) -> ToyWorld:
    """Render images, write ``corpus.jsonl``, and return the world description."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    palette = concept_palette(cfg.concepts)
    size = cfg.image_size

    records: list[ImageRecord] = []
    placements: dict[str, dict[str, int]] = {}
    for idx in range(cfg.n_images):
        image_id = f"toy{idx:05d}"
        n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        concepts = [cfg.concepts[i] for i in rng.choice(len(cfg.concepts), n_obj, replace=False)]
        cells = rng.choice(cfg.grid * cfg.grid, n_obj, replace=False)

        canvas = np.full((size, size, 3), BACKGROUND, dtype=np.uint8)
        boxes, confidences = [], []
        placed: dict[str, int] = {}
        for region_idx, (concept, cell) in enumerate(zip(concepts, cells)):
            cy, cx = divmod(int(cell), cfg.grid)
            x1, y1 = cx * cfg.cell, cy * cfg.cell
            x2, y2 = x1 + cfg.cell, y1 + cfg.cell
            canvas[y1:y2, x1:x2] = palette[concept]
            boxes.append((float(x1), float(y1), float(x2), float(y2)))
            confidences.append(round(float(rng.uniform(0.5, 1.0)), 4))
            placed[concept] = region_idx

        image_path = out_dir / "images" / f"{image_id}.png"
        Image.fromarray(canvas).save(image_path)

        captions, grounding = [], []
        sizes = [n_obj]  # first caption mentions everything: the strict-max sibling
        sizes += [int(rng.integers(cfg.min_mentions, n_obj))
                  for _ in range(cfg.captions_per_image - 1)]
        for ci, k in enumerate(sizes):
            mention = [concepts[i] for i in rng.choice(n_obj, k, replace=False)]
            tokens, pos = _caption_tokens(mention)
            captions.append(CaptionEntry(text=" ".join(tokens),
                                         tokens=tuple(tokens), pos=tuple(pos)))
            for p, tok in enumerate(tokens):
                if pos[p] == "NOUN":
                    grounding.append(GroundingEntry(caption_idx=ci, token_span=(p, p + 1),
                                                    box_indices=(placed[tok],)))

        records.append(ImageRecord(image_id=image_id, image_path=str(image_path),
                                   boxes=tuple(boxes), confidences=tuple(confidences),
                                   captions=tuple(captions), grounding=tuple(grounding)))
        placements[image_id] = placed

    write_corpus(records, out_dir / "corpus.jsonl")
    return ToyWorld(config=cfg, records=records, placements=placements, root=out_dir)


@dataclass
class PollutedEvalCaption:
    """A held-out caption with one word made wrong on purpose.

    ``gold_correct`` marks each semantic token: True everywhere except the
    replaced position, whose new word is guaranteed absent from the image.
    """

    image_id: str
    tokens: list[str]
    pos: list[str]
    semantic_positions: list[int]
    gold_correct: list[bool]
    replaced_position: int


def make_polluted_eval_set(world: ToyWorld, records: list[ImageRecord],
                           seed: int = 17) -> list[PollutedEvalCaption]:
    rng = np.random.default_rng(seed)
    out = []
    for record in records:
        present = set(world.placements[record.image_id])
        absent = [c for c in world.config.concepts if c not in present]
        for cap in record.captions:
            sem_pos = [i for i, p in enumerate(cap.pos) if p == "NOUN"]
            target = int(sem_pos[rng.integers(len(sem_pos))])
            replacement = absent[int(rng.integers(len(absent)))]
            tokens = list(cap.tokens)
            tokens[target] = replacement
            out.append(PollutedEvalCaption(
                image_id=record.image_id, tokens=tokens, pos=list(cap.pos),
                semantic_positions=sem_pos,
                gold_correct=[i != target for i in sem_pos],
                replaced_position=target))
    return out


@dataclass
class RecallSiblingPair:
    """Two captions of one image with strictly different semantic richness."""

    image_id: str
    rich_idx: int
    poor_idx: int


def make_recall_sibling_pairs(records: list[ImageRecord]) -> list[RecallSiblingPair]:
    pairs = []
    for record in records:
        counts = [sum(1 for p in cap.pos if p == "NOUN") for cap in record.captions]
        rich = int(np.argmax(counts))
        for ci, c in enumerate(counts):
            if c < counts[rich]:
                pairs.append(RecallSiblingPair(image_id=record.image_id,
                                               rich_idx=rich, poor_idx=ci))
    return pairs
