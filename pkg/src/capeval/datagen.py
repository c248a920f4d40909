"""Construction of training supervision from an annotated corpus.

Three kinds of signal are derived:
  * hard textual negatives: among the captions of one image, the one with
    strictly the most semantic words becomes the positive, the rest become
    negatives (ties mean the image contributes nothing);
  * polluted captions: one semantic word swapped for a frequent word with
    the same POS tag, labeling that position 0, other semantic positions 1,
    non-semantic positions -1 (excluded);
  * region labels: every region referenced by a caption's phrase grounding
    is labeled 1, the rest 0.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ImageRecord, write_jsonl
from .encoding import TRAIN_SEMANTIC_POS

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 100


class InsufficientCaptionsError(ValueError):
    pass


class NoSemanticWordsError(ValueError):
    pass


@dataclass(frozen=True)
class PollutionVocab:
    """Frequency-ranked word lists per POS tag, truncated to the top_k."""

    words_by_pos: dict[str, tuple[str, ...]]
    counts_by_pos: dict[str, tuple[int, ...]]
    top_k: int = DEFAULT_TOP_K

    @classmethod
    def from_captions(cls, captions, semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS,
                      top_k: int = DEFAULT_TOP_K) -> "PollutionVocab":
        """Count semantic words per POS over (tokens, pos) caption pairs."""
        counters: dict[str, Counter] = {}
        for tokens, pos_tags in captions:
            for tok, pos in zip(tokens, pos_tags):
                if pos in semantic_pos:
                    counters.setdefault(pos, Counter())[tok] += 1
        words, counts = {}, {}
        for pos, counter in counters.items():
            ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
            words[pos] = tuple(w for w, _ in ranked)
            counts[pos] = tuple(c for _, c in ranked)
        if not words:
            raise NoSemanticWordsError("corpus contains no semantic words")
        return cls(words_by_pos=words, counts_by_pos=counts, top_k=top_k)

    def sample_replacement(self, pos: str, exclude: str, rng) -> str | None:
        """Frequency-weighted draw of a word with tag ``pos`` different from ``exclude``."""
        words = self.words_by_pos.get(pos, ())
        choices = [(w, c) for w, c in zip(words, self.counts_by_pos.get(pos, ())) if w != exclude]
        if not choices:
            return None
        weights = np.array([c for _, c in choices], dtype=np.float64)
        idx = rng.choice(len(choices), p=weights / weights.sum())
        return choices[idx][0]


def semantic_word_count(pos_tags, semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS) -> int:
    return sum(1 for p in pos_tags if p in semantic_pos)


def select_hard_negative(captions, semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS
                         ) -> tuple[int, list[int]] | None:
    """Pick the positive (strictly richest caption) and its hard negatives.

    ``captions`` is a sequence of (tokens, pos_tags). Returns
    (positive_index, negative_indices), or None when the maximum semantic
    count is tied and the image is skipped.
    """
    if len(captions) < 2:
        raise InsufficientCaptionsError("insufficient captions")
    counts = [semantic_word_count(pos, semantic_pos) for _, pos in captions]
    best = max(counts)
    winners = [i for i, c in enumerate(counts) if c == best]
    if len(winners) != 1:
        return None
    pos_idx = winners[0]
    return pos_idx, [i for i in range(len(captions)) if i != pos_idx]


def pollute_caption(tokens, pos_tags, vocab: PollutionVocab, rng,
                    semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS
                    ) -> tuple[list[str], list[int]]:
    """Replace one random semantic word with a frequent same-POS word.

    Returns the new token list and the per-token labels: 0 at the replaced
    position, 1 at other semantic positions, -1 elsewhere.
    """
    positions = [i for i, p in enumerate(pos_tags) if p in semantic_pos]
    if not positions:
        raise NoSemanticWordsError("caption has no semantic words")
    pool = list(positions)
    replacement, chosen = None, None
    while pool and replacement is None:
        chosen = pool.pop(int(rng.integers(len(pool))))
        replacement = vocab.sample_replacement(pos_tags[chosen], tokens[chosen], rng)
    if replacement is None:
        raise NoSemanticWordsError("vocabulary offers no distinct replacement for any position")
    new_tokens = list(tokens)
    new_tokens[chosen] = replacement
    labels = [-1] * len(tokens)
    for i in positions:
        labels[i] = 1
    labels[chosen] = 0
    return new_tokens, labels


def vision_labels(grounding, m: int) -> np.ndarray:
    """0/1 labels over the m regions; 1 where any annotation mentions the region."""
    y = np.zeros(m, dtype=np.int64)
    for g in grounding:
        for k in g.box_indices:
            if not (0 <= k < m):
                raise ValueError(f"grounding box index {k} out of range for m={m}")
            y[k] = 1
    return y


def record_rng(seed: int, record_id: str, purpose: str):
    """Per-record RNG stream so records can be processed in any order."""
    digest = hashlib.blake2b(f"{purpose}:{record_id}".encode(), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "little")])


@dataclass
class DatagenSummary:
    coarse_pairs: int = 0
    htn_triplets: int = 0
    fine_text: int = 0
    fine_vision: int = 0
    skipped_records: int = 0

    def to_dict(self) -> dict:
        return {"coarse_pairs": self.coarse_pairs, "htn_triplets": self.htn_triplets,
                "fine_text": self.fine_text, "fine_vision": self.fine_vision,
                "skipped_records": self.skipped_records}


def build_training_sets(records: list[ImageRecord], out_dir: str | Path, seed: int = 0,
                        semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS,
                        top_k: int = DEFAULT_TOP_K) -> DatagenSummary:
    """Materialize coarse pairs, HTN triplets, and fine-grained label files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_captions = [(c.tokens, c.pos) for r in records for c in r.captions]
    vocab = PollutionVocab.from_captions(all_captions, semantic_pos, top_k)

    summary = DatagenSummary()
    coarse, htn, fine_text, fine_vision = [], [], [], []
    for record in records:
        try:
            for ci, _ in enumerate(record.captions):
                coarse.append({"image_id": record.image_id, "caption_idx": ci})

            if len(record.captions) >= 2:
                selection = select_hard_negative([(c.tokens, c.pos) for c in record.captions],
                                                 semantic_pos)
                if selection is not None:
                    pos_idx, neg_idxs = selection
                    for ni in neg_idxs:
                        htn.append({"image_id": record.image_id,
                                    "pos_idx": pos_idx, "neg_idx": ni})

            for ci, cap in enumerate(record.captions):
                if semantic_word_count(cap.pos, semantic_pos) == 0:
                    continue
                rng = record_rng(seed, f"{record.image_id}/{ci}", "pollute")
                tokens, labels = pollute_caption(cap.tokens, cap.pos, vocab, rng, semantic_pos)
                fine_text.append({"image_id": record.image_id, "caption_idx": ci,
                                  "tokens": tokens, "pos": list(cap.pos),
                                  "polluted_idx": labels.index(0), "Y_t": labels})

            by_caption: dict[int, list] = {}
            for g in record.grounding:
                by_caption.setdefault(g.caption_idx, []).append(g)
            for ci, anns in sorted(by_caption.items()):
                y = vision_labels(anns, len(record.boxes))
                if y.sum() < 1:
                    continue
                fine_vision.append({"image_id": record.image_id, "caption_idx": ci,
                                    "Y_v": [int(v) for v in y]})
        except (ValueError, KeyError) as exc:
            summary.skipped_records += 1
            log.error("skipping record %s: %s", record.image_id, exc)

    for name, rows in (("coarse", coarse), ("htn", htn),
                       ("fine_text", fine_text), ("fine_vision", fine_vision)):
        rng = record_rng(seed, name, "shuffle")
        order = rng.permutation(len(rows))
        write_jsonl((rows[i] for i in order), out_dir / f"{name}.jsonl")

    summary.coarse_pairs = len(coarse)
    summary.htn_triplets = len(htn)
    summary.fine_text = len(fine_text)
    summary.fine_vision = len(fine_vision)
    return summary
