"""Token-level feature extraction for images (regions + global + null) and captions.

Region boxes arrive from an external detector; captions arrive pre-tokenized
and POS-tagged. The only model consulted here is the embedding backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .backbone import EmbeddingBackbone

MAX_TEXT_LEN = 32

# Content-word tag sets. The first drives training supervision and inference
# masks, the second drives token-level benchmark accuracy; both configurable
# at the call sites that use them.
TRAIN_SEMANTIC_POS = frozenset({"NOUN", "PROPN", "VERB", "ADJ", "ADV"})
EVAL_SEMANTIC_POS = frozenset({"NOUN", "PROPN", "VERB", "ADJ", "NUM"})


class DegenerateCropError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSet:
    """Detected bounding boxes in absolute pixel coordinates, with confidences."""

    boxes: tuple[tuple[float, float, float, float], ...]
    confidences: tuple[float, ...]
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(tuple(float(v) for v in b) for b in self.boxes))
        object.__setattr__(self, "confidences", tuple(float(c) for c in self.confidences))
        w, h = self.image_size
        if len(self.boxes) != len(self.confidences):
            raise ValueError("boxes and confidences must have equal length")
        for i, (x1, y1, x2, y2) in enumerate(self.boxes):
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"box {i} is empty or inverted: {(x1, y1, x2, y2)}")
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise ValueError(f"box {i} outside image bounds {self.image_size}")
        for i, c in enumerate(self.confidences):
            if not (0.0 <= c <= 1.0):
                raise ValueError(f"confidence {i} outside [0, 1]: {c}")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class ImageTokenFeatures:
    """Per-region vectors plus the global and (all-zero) null token."""

    region_feats: np.ndarray      # (m, d)
    global_feat: np.ndarray       # (d,)
    null_feat: np.ndarray         # (d,), exactly zero
    norm_boxes: np.ndarray        # (m, 4) in [0, 1]

    def __post_init__(self):
        m, d = self.region_feats.shape
        if m < 1:
            raise ValueError("need at least one region")
        if self.global_feat.shape != (d,) or self.null_feat.shape != (d,):
            raise ValueError("feature dimension mismatch")
        if self.norm_boxes.shape != (m, 4):
            raise ValueError("norm_boxes shape mismatch")
        if np.any(self.null_feat != 0):
            raise ValueError("null token feature must be exactly zero")
        if not (np.all(np.isfinite(self.region_feats)) and np.all(np.isfinite(self.global_feat))):
            raise ValueError("non-finite image features")

    @property
    def num_regions(self) -> int:
        return self.region_feats.shape[0]

    @property
    def dim(self) -> int:
        return self.region_feats.shape[1]


@dataclass(frozen=True)
class CaptionTokenFeatures:
    """Independently encoded token vectors plus the sentence-level vector.

    Each token vector is produced by encoding that token alone, so it carries
    no sentence context; only ``global_feat`` sees the whole caption.
    """

    token_feats: np.ndarray       # (n, d)
    global_feat: np.ndarray       # (d,)
    tokens: tuple[str, ...]
    pos_tags: tuple[str, ...]
    semantic_mask: np.ndarray     # (n,) bool
    truncated: bool = field(default=False)

    def __post_init__(self):
        n, d = self.token_feats.shape
        if n < 1:
            raise ValueError("empty caption")
        if n > MAX_TEXT_LEN:
            raise ValueError(f"caption longer than {MAX_TEXT_LEN} tokens")
        if len(self.tokens) != n or len(self.pos_tags) != n or self.semantic_mask.shape != (n,):
            raise ValueError("token metadata length mismatch")
        if self.global_feat.shape != (d,):
            raise ValueError("feature dimension mismatch")

    @property
    def num_tokens(self) -> int:
        return self.token_feats.shape[0]

    @property
    def num_semantic(self) -> int:
        return int(self.semantic_mask.sum())


def dedup_regions(candidates: RegionSet, k: int, seed: int = 0) -> RegionSet:
    """Reduce a redundant region pool to at most ``k`` representatives.

    Boxes are clustered by K-means over their normalized (cx, cy, w, h)
    geometry; the highest-confidence box of each cluster survives
    (confidence ties broken by lowest index). Output is ordered by
    descending confidence and is reproducible for a fixed ``seed``.
    """
    if len(candidates) == 0:
        raise ValueError("no regions")
    if k <= 0:
        raise ValueError(f"cluster count must be positive, got {k}")

    m = len(candidates)
    keep: list[int]
    if m <= k:
        keep = list(range(m))
    else:
        w, h = candidates.image_size
        geom = np.array([[(x1 + x2) / 2 / w, (y1 + y2) / 2 / h,
                          (x2 - x1) / w, (y2 - y1) / h]
                         for x1, y1, x2, y2 in candidates.boxes])
        km = KMeans(n_clusters=k, n_init=10, random_state=seed)
        labels = km.fit_predict(geom)
        keep = []
        for cluster in np.unique(labels):
            members = np.flatnonzero(labels == cluster)
            best = members[np.argmax([candidates.confidences[i] for i in members])]
            keep.append(int(best))
    keep.sort(key=lambda i: (-candidates.confidences[i], i))
    return RegionSet(boxes=tuple(candidates.boxes[i] for i in keep),
                     confidences=tuple(candidates.confidences[i] for i in keep),
                     image_size=candidates.image_size)


def crop(image: np.ndarray, box: tuple[float, float, float, float], index: int) -> np.ndarray:
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    if x2 <= x1 or y2 <= y1:
        raise DegenerateCropError(f"box {index} degenerates to zero area after rounding: {box}")
    return image[y1:y2, x1:x2]


def extract_image_tokens(image: np.ndarray, regions: RegionSet,
                         backbone: EmbeddingBackbone) -> ImageTokenFeatures:
    """Embed each region crop, the whole image, and append the zero null token."""
    if len(regions) == 0:
        raise ValueError("no regions")
    image = np.asarray(image)
    h, w = image.shape[:2]
    if (w, h) != tuple(regions.image_size):
        raise ValueError(f"image size {(w, h)} does not match region set {regions.image_size}")
    region_feats = np.stack([backbone.embed_image(crop(image, box, i))
                             for i, box in enumerate(regions.boxes)])
    global_feat = backbone.embed_image(image)
    norm_boxes = np.array([[x1 / w, y1 / h, x2 / w, y2 / h]
                           for x1, y1, x2, y2 in regions.boxes], dtype=np.float32)
    return ImageTokenFeatures(region_feats=region_feats, global_feat=global_feat,
                              null_feat=np.zeros(backbone.dim, dtype=np.float32),
                              norm_boxes=norm_boxes)


def extract_caption_tokens(tokens: list[str], pos_tags: list[str],
                           backbone: EmbeddingBackbone,
                           semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS,
                           max_len: int = MAX_TEXT_LEN) -> CaptionTokenFeatures:
    """Embed every caption token in isolation plus the full sentence.

    Captions longer than ``max_len`` tokens are truncated and flagged.
    """
    if len(tokens) == 0:
        raise ValueError("empty caption")
    if len(tokens) != len(pos_tags):
        raise ValueError("tokens and pos_tags must have equal length")
    truncated = len(tokens) > max_len
    if truncated:
        tokens = tokens[:max_len]
        pos_tags = pos_tags[:max_len]
    token_feats = np.stack([backbone.embed_text_sequence([t]) for t in tokens])
    global_feat = backbone.embed_text_sequence(tokens)
    semantic_mask = np.array([p in semantic_pos for p in pos_tags], dtype=bool)
    return CaptionTokenFeatures(token_feats=token_feats, global_feat=global_feat,
                                tokens=tuple(tokens), pos_tags=tuple(pos_tags),
                                semantic_mask=semantic_mask, truncated=truncated)
