"""Fine-grained scoring: token-level attention scores and the derived metrics.

The global text vector queries the fused vision tokens (regions + null) to
produce region scores alpha_v; the global vision vector queries the fused
text tokens to produce word scores alpha_t. Weighted averages under those
scores give conditioned global features, whose cosine against the raw
backbone globals (scaled by a learned temperature) yields the vision recall
and text precision scores; the overall score is their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoding import CaptionTokenFeatures, ImageTokenFeatures

TAU_MIN = 1e-3
TAU_MAX = 10.0
DEFAULT_BETA = 0.1
CLIP_S_WEIGHT = 2.5


class DegenerateFeatureError(ValueError):
    pass


class ScoringHead(nn.Module):
    """Learned bilinear attention parameters and the score temperature."""

    def __init__(self, dim: int, d_k: int | None = None, tau_init: float = 0.07):
        super().__init__()
        d_k = dim if d_k is None else d_k
        self.dim = dim
        self.d_k = d_k
        self.query_vision = nn.Parameter(torch.empty(dim, d_k))
        self.key_vision = nn.Parameter(torch.empty(dim, d_k))
        self.query_text = nn.Parameter(torch.empty(dim, d_k))
        self.key_text = nn.Parameter(torch.empty(dim, d_k))
        for w in (self.query_vision, self.key_vision, self.query_text, self.key_text):
            nn.init.xavier_uniform_(w)
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))

    def clamp_tau(self) -> None:
        # keep the temperature in a sane range after every optimizer step
        with torch.no_grad():
            self.tau.clamp_(TAU_MIN, TAU_MAX)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def attention_scores(query_global, keys, w_query, w_key, valid=None) -> torch.Tensor:
    """Softmax-normalized bilinear scores of one global query against token keys.

    ``query_global``: (..., d); ``keys``: (..., K, d). Entries where ``valid``
    is False are excluded from the softmax. Returns (..., K) on the simplex.
    """
    query_global, keys = _as_tensor(query_global), _as_tensor(keys)
    w_query, w_key = _as_tensor(w_query), _as_tensor(w_key)
    q = query_global @ w_query
    k = keys @ w_key
    s = (k @ q.unsqueeze(-1)).squeeze(-1)
    if valid is not None:
        s = s.masked_fill(~valid, float("-inf"))
    return torch.softmax(s, dim=-1)


def vision_token_scores(text_global, vision_tokens, head: ScoringHead,
                        valid=None) -> torch.Tensor:
    """alpha_v over the m+1 fused vision tokens (null last)."""
    return attention_scores(text_global, vision_tokens,
                            head.query_vision, head.key_vision, valid)


def text_token_scores(vision_global, text_tokens, head: ScoringHead,
                      valid=None) -> torch.Tensor:
    """alpha_t over the n fused text tokens."""
    return attention_scores(vision_global, text_tokens,
                            head.query_text, head.key_text, valid)


def cosine(a, b, check_degenerate: bool = False) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if check_degenerate and (na == 0).any():
        raise DegenerateFeatureError("degenerate conditioned feature")
    return (a * b).sum(-1) / (na * nb).clamp_min(1e-12)


def conditioned_feature(alpha, feats) -> torch.Tensor:
    """Weighted average of token features: (..., K) x (..., K, d) -> (..., d)."""
    alpha, feats = _as_tensor(alpha), _as_tensor(feats)
    return (alpha.unsqueeze(-1) * feats).sum(-2)


def recall_score(alpha_v, vision_tokens, vision_global, tau) -> torch.Tensor:
    """How much of the image's salient content the caption covers."""
    cond = conditioned_feature(alpha_v, vision_tokens)
    return cosine(cond, _as_tensor(vision_global), check_degenerate=True) / _as_tensor(tau)


def precision_score(alpha_t, text_tokens, text_global, tau) -> torch.Tensor:
    """How accurate the caption's content is with respect to the image."""
    cond = conditioned_feature(alpha_t, text_tokens)
    return cosine(cond, _as_tensor(text_global), check_degenerate=True) / _as_tensor(tau)


def overall_score(recall, precision):
    return recall + precision


def plus_score(overall, vision_global, text_global, logit_temperature):
    """Overall score augmented with the backbone's own global similarity."""
    if logit_temperature is None:
        raise ValueError("backbone provides no logit temperature")
    sim = cosine(vision_global, text_global)
    return overall + float(sim) / float(logit_temperature)


@dataclass(frozen=True)
class TokenScores:
    alpha_v: np.ndarray   # (m+1,), last entry is the null token
    alpha_t: np.ndarray   # (n,)

    def __post_init__(self):
        for name, a in (("alpha_v", self.alpha_v), ("alpha_t", self.alpha_t)):
            if abs(float(a.sum()) - 1.0) > 1e-6 or (a < 0).any():
                raise ValueError(f"{name} is not on the probability simplex")

    @property
    def null_score(self) -> float:
        return float(self.alpha_v[-1])


@dataclass(frozen=True)
class TokenDecisions:
    semantic_indices: tuple[int, ...]
    correct_word_mask: tuple[bool, ...]   # aligned with semantic_indices
    mentioned_region_mask: tuple[bool, ...]  # over the m regions
    null_flag: bool
    beta: float


def token_decisions(scores: TokenScores, semantic_mask,
                    beta: float = DEFAULT_BETA) -> TokenDecisions:
    """Threshold token scores into correct/mentioned judgments.

    Strictly greater than ``beta`` counts; scores equal to the threshold are
    judged negative. Non-semantic words receive no judgment. A null score
    above the threshold flags the caption as irrelevant to the image.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    semantic_mask = np.asarray(semantic_mask, dtype=bool)
    if semantic_mask.shape != scores.alpha_t.shape:
        raise ValueError("semantic mask length does not match alpha_t")
    sem_idx = tuple(int(i) for i in np.flatnonzero(semantic_mask))
    correct = tuple(bool(scores.alpha_t[i] > beta) for i in sem_idx)
    mentioned = tuple(bool(v > beta) for v in scores.alpha_v[:-1])
    return TokenDecisions(semantic_indices=sem_idx, correct_word_mask=correct,
                          mentioned_region_mask=mentioned,
                          null_flag=bool(scores.alpha_v[-1] > beta), beta=beta)


@dataclass(frozen=True)
class ScoreReport:
    """Full evaluation of one image-caption pair."""

    precision: float
    recall: float
    overall: float
    plus: float | None
    token_scores: TokenScores
    decisions: TokenDecisions
    tokens: tuple[str, ...]
    norm_boxes: tuple[tuple[float, float, float, float], ...] | None = None
    truncated: bool = False

    def __post_init__(self):
        if self.overall != self.precision + self.recall:
            raise ValueError("overall score must equal precision + recall exactly")

    @property
    def null_score(self) -> float:
        return self.token_scores.null_score

    def to_json_dict(self) -> dict:
        d = self.decisions
        correct_words = [
            {"idx": idx, "token": self.tokens[idx],
             "score": float(self.token_scores.alpha_t[idx]), "ok": ok}
            for idx, ok in zip(d.semantic_indices, d.correct_word_mask)
        ]
        regions = [
            {"idx": k, "box": list(self.norm_boxes[k]) if self.norm_boxes else None,
             "score": float(self.token_scores.alpha_v[k]), "mentioned": mentioned}
            for k, mentioned in enumerate(d.mentioned_region_mask)
        ]
        return {
            "precision": self.precision,
            "recall": self.recall,
            "overall": self.overall,
            "plus": self.plus,
            "alpha_v": [float(v) for v in self.token_scores.alpha_v],
            "alpha_t": [float(v) for v in self.token_scores.alpha_t],
            "null_score": self.null_score,
            "null_flag": d.null_flag,
            "beta": d.beta,
            "tokens": list(self.tokens),
            "truncated": self.truncated,
            "correct_words": correct_words,
            "regions": regions,
        }


def build_report(alpha_v: np.ndarray, alpha_t: np.ndarray, f_recall: float,
                 f_precision: float, semantic_mask, tokens, beta: float,
                 plus: float | None = None, norm_boxes=None,
                 truncated: bool = False) -> ScoreReport:
    scores = TokenScores(alpha_v=np.asarray(alpha_v, dtype=np.float64),
                         alpha_t=np.asarray(alpha_t, dtype=np.float64))
    decisions = token_decisions(scores, semantic_mask, beta)
    overall = f_recall + f_precision
    boxes = tuple(tuple(float(v) for v in b) for b in norm_boxes) if norm_boxes is not None else None
    return ScoreReport(precision=float(f_precision), recall=float(f_recall),
                       overall=float(overall),
                       plus=float(plus) if plus is not None else None,
                       token_scores=scores, decisions=decisions,
                       tokens=tuple(tokens), norm_boxes=boxes, truncated=truncated)


def baseline_clip_s(vision_global, text_global, weight: float = CLIP_S_WEIGHT) -> float:
    """Rectified global cosine similarity, the standard backbone-only metric."""
    v = np.asarray(vision_global, dtype=np.float64)
    t = np.asarray(text_global, dtype=np.float64)
    if np.linalg.norm(v) == 0 or np.linalg.norm(t) == 0:
        raise ValueError("zero vector has no direction")
    return float(weight * max(float(cosine(v, t)), 0.0))


def baseline_infoclip(img: ImageTokenFeatures, cap: CaptionTokenFeatures,
                      beta: float = DEFAULT_BETA) -> ScoreReport:
    """Fine-grained scoring straight off the backbone features.

    No fusion and no learned parameters: attention scores are plain dot
    products of the raw global features against raw token features, and the
    temperature is fixed to 1.
    """
    vision_tokens = np.concatenate([img.region_feats, img.null_feat[None]], axis=0)
    text_tokens = cap.token_feats
    t_g = torch.as_tensor(cap.global_feat, dtype=torch.float64)
    v_g = torch.as_tensor(img.global_feat, dtype=torch.float64)
    vis = torch.as_tensor(vision_tokens, dtype=torch.float64)
    txt = torch.as_tensor(text_tokens, dtype=torch.float64)
    alpha_v = torch.softmax(vis @ t_g, dim=-1)
    alpha_t = torch.softmax(txt @ v_g, dim=-1)
    f_r = recall_score(alpha_v, vis, v_g, 1.0)
    f_p = precision_score(alpha_t, txt, t_g, 1.0)
    return build_report(alpha_v.numpy(), alpha_t.numpy(), float(f_r), float(f_p),
                        cap.semantic_mask, cap.tokens, beta,
                        norm_boxes=img.norm_boxes, truncated=cap.truncated)
