"""The trainable evaluation model: fusion transformers plus the scoring head.

The backbone stays outside the module and is never trained; the model
consumes its token features and produces token-level scores and the
precision/recall/overall metrics, batched for training and one pair at a
time for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import scoring
from .backbone import EmbeddingBackbone
from .encoding import (
    EVAL_SEMANTIC_POS,
    TRAIN_SEMANTIC_POS,
    CaptionTokenFeatures,
    ImageTokenFeatures,
    RegionSet,
    extract_caption_tokens,
    extract_image_tokens,
)
from .fusion import FusionConfig, FusionModule, FusionOutput, PairBatch, collate_pairs
from .scoring import DEFAULT_BETA, ScoreReport, ScoringHead, build_report


@dataclass
class ModelConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    d_k: int | None = None
    tau_init: float = 0.07
    beta: float = DEFAULT_BETA
    semantic_pos_training: tuple[str, ...] = tuple(sorted(TRAIN_SEMANTIC_POS))
    semantic_pos_eval: tuple[str, ...] = tuple(sorted(EVAL_SEMANTIC_POS))
    seed: int = 0

    def to_dict(self) -> dict:
        return {"fusion": self.fusion.to_dict(), "d_k": self.d_k,
                "tau_init": self.tau_init, "beta": self.beta,
                "semantic_pos_training": list(self.semantic_pos_training),
                "semantic_pos_eval": list(self.semantic_pos_eval),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(fusion=FusionConfig.from_dict(d["fusion"]), d_k=d.get("d_k"),
                   tau_init=d.get("tau_init", 0.07), beta=d.get("beta", DEFAULT_BETA),
                   semantic_pos_training=tuple(d["semantic_pos_training"]),
                   semantic_pos_eval=tuple(d["semantic_pos_eval"]),
                   seed=d.get("seed", 0))

    @classmethod
    def desk_preset(cls, seed: int = 0) -> "ModelConfig":
        """Small configuration that trains in minutes on a laptop CPU."""
        return cls(fusion=FusionConfig(dim=16, n_intra_layers=2, n_inter_layers=1,
                                       n_heads=4),
                   seed=seed)


@dataclass
class PairScores:
    """Batched scoring output; alpha rows are padded past each pair's length."""

    f_recall: torch.Tensor        # (B,)
    f_precision: torch.Tensor     # (B,)
    alpha_v: torch.Tensor         # (B, M+1), null score in the last column
    vision_valid: torch.Tensor    # (B, M+1) bool
    alpha_t: torch.Tensor         # (B, N)
    token_valid: torch.Tensor     # (B, N) bool
    fused: FusionOutput

    @property
    def f_overall(self) -> torch.Tensor:
        return self.f_recall + self.f_precision


class EvaluationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        torch.manual_seed(config.seed)  # reproducible parameter init
        self.config = config
        self.fusion = FusionModule(config.fusion)
        self.head = ScoringHead(config.fusion.dim, config.d_k, config.tau_init)

    @property
    def dim(self) -> int:
        return self.config.fusion.dim

    def forward(self, batch: PairBatch) -> PairScores:
        fused = self.fusion(batch)
        b = batch.batch_size
        ones = torch.ones(b, 1, dtype=torch.bool, device=batch.region_mask.device)
        vision_tokens = torch.cat([fused.regions, fused.null.unsqueeze(1)], dim=1)
        vision_valid = torch.cat([batch.region_mask, ones], dim=1)
        alpha_v = scoring.vision_token_scores(batch.text_global, vision_tokens,
                                              self.head, valid=vision_valid)
        alpha_t = scoring.text_token_scores(batch.vision_global, fused.text,
                                            self.head, valid=batch.token_mask)
        f_r = scoring.recall_score(alpha_v, vision_tokens, batch.vision_global, self.head.tau)
        f_p = scoring.precision_score(alpha_t, fused.text, batch.text_global, self.head.tau)
        return PairScores(f_recall=f_r, f_precision=f_p, alpha_v=alpha_v,
                          vision_valid=vision_valid, alpha_t=alpha_t,
                          token_valid=batch.token_mask, fused=fused)

    def score_features(self, img: ImageTokenFeatures, cap: CaptionTokenFeatures,
                       beta: float | None = None, plus: bool = False,
                       logit_temperature: float | None = None) -> ScoreReport:
        """Score one extracted pair in eval mode."""
        was_training = self.training
        self.eval()
        try:
            dtype = next(self.parameters()).dtype
            batch = collate_pairs([(img, cap)], dtype=dtype)
            with torch.no_grad():
                out = self(batch)
        finally:
            self.train(was_training)
        plus_val = None
        if plus:
            plus_val = scoring.plus_score(float(out.f_overall[0]), img.global_feat,
                                          cap.global_feat, logit_temperature)
            # keep the reported overall/precision/recall identity untouched
            plus_val = float(plus_val)
        return build_report(
            alpha_v=out.alpha_v[0].numpy().astype(np.float64),
            alpha_t=out.alpha_t[0].numpy().astype(np.float64),
            f_recall=float(out.f_recall[0]), f_precision=float(out.f_precision[0]),
            semantic_mask=cap.semantic_mask, tokens=cap.tokens,
            beta=self.config.beta if beta is None else beta,
            plus=plus_val, norm_boxes=img.norm_boxes, truncated=cap.truncated)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def score_pair(image: np.ndarray, regions: RegionSet, tokens: list[str],
               pos_tags: list[str], model: EvaluationModel,
               backbone: EmbeddingBackbone, beta: float | None = None,
               plus: bool = False,
               semantic_pos: frozenset[str] | None = None) -> ScoreReport:
    """Full pipeline for one pair: encode, fuse, score, threshold."""
    if semantic_pos is None:
        semantic_pos = frozenset(model.config.semantic_pos_training)
    img_feats = extract_image_tokens(image, regions, backbone)
    cap_feats = extract_caption_tokens(tokens, pos_tags, backbone,
                                       semantic_pos=semantic_pos)
    return model.score_features(img_feats, cap_feats, beta=beta, plus=plus,
                                logit_temperature=backbone.logit_temperature)


def extract_corpus_features(records, backbone: EmbeddingBackbone,
                            semantic_pos: frozenset[str],
                            image_root=None) -> tuple[dict, dict]:
    """Backbone features for every image and caption of a record list."""
    from .corpus import load_image, record_region_set

    images: dict[str, ImageTokenFeatures] = {}
    captions: dict[tuple[str, int], CaptionTokenFeatures] = {}
    for record in records:
        path = Path(record.image_path)
        if image_root is not None and not path.is_absolute():
            path = Path(image_root) / path
        image = load_image(path)
        images[record.image_id] = extract_image_tokens(
            image, record_region_set(record, image), backbone)
        for ci, cap in enumerate(record.captions):
            captions[(record.image_id, ci)] = extract_caption_tokens(
                list(cap.tokens), list(cap.pos), backbone, semantic_pos=semantic_pos)
    return images, captions


def score_corpus(records, model: EvaluationModel, backbone: EmbeddingBackbone,
                 beta: float | None = None, plus: bool = False,
                 semantic_pos: frozenset[str] | None = None,
                 image_root=None) -> list[dict]:
    """Score every (image, caption) pair of a corpus; one row per pair."""
    if semantic_pos is None:
        semantic_pos = frozenset(model.config.semantic_pos_training)
    images, captions = extract_corpus_features(records, backbone, semantic_pos, image_root)
    rows = []
    for record in records:
        for ci in range(len(record.captions)):
            report = model.score_features(
                images[record.image_id], captions[(record.image_id, ci)],
                beta=beta, plus=plus, logit_temperature=backbone.logit_temperature)
            rows.append({"image_id": record.image_id, "caption_idx": ci,
                         "report": report})
    return rows


def cross_score_matrix(records, model: EvaluationModel, backbone: EmbeddingBackbone,
                       caption_idx: int = 0, score_key: str = "overall",
                       image_root=None, chunk: int = 256) -> np.ndarray:
    """N x N score matrix of every image against every record's caption.

    Entry [i, j] scores image i with the ``caption_idx``-th caption of
    record j; the diagonal holds the aligned pairs.
    """
    if score_key not in ("overall", "recall", "precision", "plus"):
        raise ValueError(f"unknown score key {score_key!r}")
    semantic_pos = frozenset(model.config.semantic_pos_training)
    images, captions = extract_corpus_features(records, backbone, semantic_pos, image_root)
    n = len(records)
    pair_list = [(images[records[i].image_id],
                  captions[(records[j].image_id, caption_idx)])
                 for i in range(n) for j in range(n)]
    was_training = model.training
    model.eval()
    values = []
    try:
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            for start in range(0, len(pair_list), chunk):
                out = model(collate_pairs(pair_list[start:start + chunk], dtype=dtype))
                if score_key == "recall":
                    values.append(out.f_recall)
                elif score_key == "precision":
                    values.append(out.f_precision)
                else:
                    values.append(out.f_overall)
    finally:
        model.train(was_training)
    matrix = torch.cat(values).view(n, n).numpy().astype(np.float64)
    if score_key == "plus":
        if backbone.logit_temperature is None:
            raise ValueError("backbone provides no logit temperature")
        for i in range(n):
            v_g = images[records[i].image_id].global_feat
            for j in range(n):
                t_g = captions[(records[j].image_id, caption_idx)].global_feat
                matrix[i, j] += float(scoring.cosine(v_g, t_g)) / backbone.logit_temperature
    return matrix
