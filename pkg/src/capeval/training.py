"""Multi-task optimization of the evaluation model.

Coarse steps apply in-batch contrastive (NCE) losses to the recall and
precision score matrices, plus a hard-textual-negative term when the
sampled caption has poorer siblings. Fine steps apply token-level
cross-entropy to the word and region score distributions. Tasks alternate
on a fixed coarse:fine schedule. The backbone is never touched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import EmbeddingBackbone
from .checkpoint import save_checkpoint
from .corpus import ImageRecord, read_jsonl
from .encoding import (
    TRAIN_SEMANTIC_POS,
    CaptionTokenFeatures,
    ImageTokenFeatures,
    extract_caption_tokens,
)
from .fusion import collate_pairs
from .model import EvaluationModel, extract_corpus_features

log = logging.getLogger(__name__)

LOG_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    pass


def nce_loss(scores: torch.Tensor) -> torch.Tensor:
    """Symmetric in-batch contrastive loss over a square score matrix.

    Row i holds the scores of image i against every caption in the batch;
    the diagonal is the aligned pair. The loss averages the row-wise
    (caption negatives) and column-wise (image negatives) cross-entropies.
    """
    scores = scores if isinstance(scores, torch.Tensor) else torch.as_tensor(scores, dtype=torch.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"expected a square score matrix, got {tuple(scores.shape)}")
    if not torch.isfinite(scores).all():
        raise ValueError("non-finite scores in contrastive batch")
    b = scores.shape[0]
    target = torch.arange(b, device=scores.device)
    l_rows = F.cross_entropy(scores, target)
    l_cols = F.cross_entropy(scores.t(), target)
    return (l_rows + l_cols) / 2


def htn_loss(f_pos, f_neg) -> torch.Tensor:
    """Two-way softmax loss pushing the richer caption's score above its sibling's."""
    f_pos = f_pos if isinstance(f_pos, torch.Tensor) else torch.as_tensor(float(f_pos))
    f_neg = f_neg if isinstance(f_neg, torch.Tensor) else torch.as_tensor(float(f_neg))
    return F.softplus(f_neg - f_pos)


def _clamped_log(alpha: torch.Tensor, positive: torch.Tensor, what: str) -> torch.Tensor:
    if (alpha[positive] < LOG_EPS).any():
        log.warning("%s: clamping near-zero scores at positive labels", what)
    return torch.log(alpha.clamp_min(LOG_EPS))


def fine_text_loss(alpha_t, y_t, n_s) -> torch.Tensor:
    """Cross-entropy over word scores, averaged by the semantic word count.

    ``y_t`` uses 1 for correct words, 0 for the polluted word and -1 for
    excluded (non-semantic) positions; only the 1-labels contribute terms.
    Accepts a trailing batch of instances.
    """
    alpha_t = alpha_t if isinstance(alpha_t, torch.Tensor) else torch.as_tensor(np.asarray(alpha_t, dtype=np.float64))
    y = torch.as_tensor(np.asarray(y_t)) if not isinstance(y_t, torch.Tensor) else y_t
    n_s = torch.as_tensor(n_s, dtype=alpha_t.dtype, device=alpha_t.device)
    if (n_s < 1).any():
        raise ValueError("n_s must be >= 1")
    positive = y == 1
    logs = _clamped_log(alpha_t, positive, "fine_text_loss")
    return -(logs * positive).sum(-1) / n_s


def fine_vision_loss(alpha_v, y_v, m) -> torch.Tensor:
    """Cross-entropy over region scores, normalized by the region count m.

    ``alpha_v`` has m+1 entries (null last); labels cover only the m
    regions, and the null token is never a positive. Accepts a trailing
    batch of instances.
    """
    alpha_v = alpha_v if isinstance(alpha_v, torch.Tensor) else torch.as_tensor(np.asarray(alpha_v, dtype=np.float64))
    y = torch.as_tensor(np.asarray(y_v)) if not isinstance(y_v, torch.Tensor) else y_v
    m = torch.as_tensor(m, dtype=alpha_v.dtype, device=alpha_v.device)
    if (m < 1).any():
        raise ValueError("m must be >= 1")
    regions = alpha_v[..., :-1]
    positive = y == 1
    logs = _clamped_log(regions, positive, "fine_vision_loss")
    return -(logs * positive).sum(-1) / m


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    total_iters: int = 32000
    coarse_per_fine: int = 3
    seed: int = 0
    use_htn: bool = True
    use_fine: bool = True
    log_every: int = 1
    checkpoint_every: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.batch_size, self.total_iters, self.coarse_per_fine) < 1 or self.lr < 0:
            raise ValueError("batch_size, total_iters, coarse_per_fine must be >= 1 and lr >= 0")

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "lr": self.lr,
                "total_iters": self.total_iters, "coarse_per_fine": self.coarse_per_fine,
                "seed": self.seed, "use_htn": self.use_htn, "use_fine": self.use_fine,
                "log_every": self.log_every, "checkpoint_every": self.checkpoint_every,
                "adam_betas": list(self.adam_betas), "adam_eps": self.adam_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    @classmethod
    def desk_preset(cls, seed: int = 0, **overrides) -> "TrainConfig":
        """Laptop-scale schedule; lr raised to compensate for the short run."""
        base = {"batch_size": 8, "lr": 1e-3, "total_iters": 2000, "seed": seed}
        base.update(overrides)
        return cls(**base)


@dataclass
class FineTextExample:
    image_id: str
    caption: CaptionTokenFeatures  # polluted caption
    labels: np.ndarray             # per-token {-1, 0, 1}


@dataclass
class FineVisionExample:
    image_id: str
    caption_idx: int
    labels: np.ndarray             # per-region {0, 1}


@dataclass
class TrainingData:
    """Pre-extracted features plus the generated supervision sets."""

    images: dict[str, ImageTokenFeatures]
    captions: dict[tuple[str, int], CaptionTokenFeatures]
    coarse_by_image: dict[str, list[int]]
    htn_negatives: dict[tuple[str, int], list[int]]
    fine_text: list[FineTextExample]
    fine_vision: list[FineVisionExample]

    def __post_init__(self):
        if not self.coarse_by_image:
            raise ValueError("no coarse training pairs")

    @property
    def image_ids(self) -> list[str]:
        return sorted(self.coarse_by_image)


def prepare_training_data(records: list[ImageRecord], generated_dir: str | Path,
                          backbone: EmbeddingBackbone,
                          semantic_pos: frozenset[str] = TRAIN_SEMANTIC_POS,
                          image_root: str | Path | None = None) -> TrainingData:
    """Extract backbone features for every image/caption named by the generated sets."""
    generated_dir = Path(generated_dir)
    by_id = {r.image_id: r for r in records}
    images, captions = extract_corpus_features(records, backbone, semantic_pos, image_root)

    coarse_by_image: dict[str, list[int]] = {}
    for row in read_jsonl(generated_dir / "coarse.jsonl"):
        coarse_by_image.setdefault(str(row["image_id"]), []).append(int(row["caption_idx"]))
    for idxs in coarse_by_image.values():
        idxs.sort()

    htn_negatives: dict[tuple[str, int], list[int]] = {}
    for row in read_jsonl(generated_dir / "htn.jsonl"):
        key = (str(row["image_id"]), int(row["pos_idx"]))
        htn_negatives.setdefault(key, []).append(int(row["neg_idx"]))
    for negs in htn_negatives.values():
        negs.sort()

    fine_text = []
    for row in read_jsonl(generated_dir / "fine_text.jsonl"):
        image_id = str(row["image_id"])
        if image_id not in by_id:
            continue
        cap = extract_caption_tokens(list(row["tokens"]), list(row["pos"]), backbone,
                                     semantic_pos=semantic_pos)
        fine_text.append(FineTextExample(image_id=image_id, caption=cap,
                                         labels=np.asarray(row["Y_t"], dtype=np.int64)))

    fine_vision = []
    for row in read_jsonl(generated_dir / "fine_vision.jsonl"):
        image_id = str(row["image_id"])
        if image_id not in by_id:
            continue
        fine_vision.append(FineVisionExample(image_id=image_id,
                                             caption_idx=int(row["caption_idx"]),
                                             labels=np.asarray(row["Y_v"], dtype=np.int64)))

    return TrainingData(images=images, captions=captions, coarse_by_image=coarse_by_image,
                        htn_negatives=htn_negatives, fine_text=fine_text,
                        fine_vision=fine_vision)


@dataclass
class TrainResult:
    model: EvaluationModel
    metrics: list[dict]
    checkpoint_dir: Path | None = None
    metrics_path: Path | None = None


def _pad_labels(rows: list[np.ndarray], width: int, fill: int) -> torch.Tensor:
    out = torch.full((len(rows), width), fill, dtype=torch.long)
    for i, row in enumerate(rows):
        out[i, :len(row)] = torch.as_tensor(row)
    return out


class Trainer:
    def __init__(self, model: EvaluationModel, data: TrainingData, cfg: TrainConfig,
                 backbone: EmbeddingBackbone | None = None):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.backbone = backbone
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr,
                                    betas=cfg.adam_betas, eps=cfg.adam_eps)

    def _sample_coarse_batch(self) -> tuple[list[str], list[int]]:
        ids = self.data.image_ids
        b = min(self.cfg.batch_size, len(ids))
        # distinct images per batch keep off-diagonal entries true negatives
        chosen = self.rng.choice(len(ids), size=b, replace=False)
        image_ids = [ids[i] for i in chosen]
        caption_idxs = [int(self.rng.choice(self.data.coarse_by_image[iid]))
                        for iid in image_ids]
        return image_ids, caption_idxs

    def _coarse_step(self) -> dict:
        image_ids, caption_idxs = self._sample_coarse_batch()
        b = len(image_ids)
        pairs = [(self.data.images[image_ids[i]],
                  self.data.captions[(image_ids[j], caption_idxs[j])])
                 for i in range(b) for j in range(b)]
        out = self.model(collate_pairs(pairs))
        f_r = out.f_recall.view(b, b)
        f_p = out.f_precision.view(b, b)
        l_r = nce_loss(f_r)
        l_p = nce_loss(f_p)
        losses = {"l_r": l_r.item(), "l_p": l_p.item()}
        loss = l_r + l_p

        if self.cfg.use_htn:
            neg_pairs, pos_rows = [], []
            for i, (iid, ci) in enumerate(zip(image_ids, caption_idxs)):
                negs = self.data.htn_negatives.get((iid, ci))
                if negs:
                    neg_idx = int(self.rng.choice(negs))
                    neg_pairs.append((self.data.images[iid],
                                      self.data.captions[(iid, neg_idx)]))
                    pos_rows.append(i)
            if neg_pairs:
                neg_out = self.model(collate_pairs(neg_pairs))
                f_pos = f_r.diagonal()[pos_rows]
                l_h = htn_loss(f_pos, neg_out.f_recall).mean()
                losses["l_htn"] = l_h.item()
                loss = loss + l_h
        return {"loss": loss, **losses}

    def _fine_step(self) -> dict:
        loss = None
        losses = {}
        if self.data.fine_text:
            idx = self.rng.choice(len(self.data.fine_text), size=self.cfg.batch_size,
                                  replace=len(self.data.fine_text) < self.cfg.batch_size)
            examples = [self.data.fine_text[i] for i in idx]
            pairs = [(self.data.images[e.image_id], e.caption) for e in examples]
            out = self.model(collate_pairs(pairs))
            y = _pad_labels([e.labels for e in examples], out.alpha_t.shape[1], fill=-1)
            n_s = torch.as_tensor([(e.labels >= 0).sum() for e in examples])
            l_t = fine_text_loss(out.alpha_t, y, n_s).mean()
            losses["l_tok_t"] = l_t.item()
            loss = l_t if loss is None else loss + l_t
        if self.data.fine_vision:
            idx = self.rng.choice(len(self.data.fine_vision), size=self.cfg.batch_size,
                                  replace=len(self.data.fine_vision) < self.cfg.batch_size)
            examples = [self.data.fine_vision[i] for i in idx]
            pairs = [(self.data.images[e.image_id],
                      self.data.captions[(e.image_id, e.caption_idx)]) for e in examples]
            out = self.model(collate_pairs(pairs))
            y = _pad_labels([e.labels for e in examples], out.alpha_v.shape[1] - 1, fill=0)
            m = torch.as_tensor([len(e.labels) for e in examples])
            l_v = fine_vision_loss(out.alpha_v, y, m).mean()
            losses["l_tok_v"] = l_v.item()
            loss = l_v if loss is None else loss + l_v
        if loss is None:
            raise ValueError("fine step scheduled but no fine-grained data present")
        return {"loss": loss, **losses}

    def run(self, out_dir: str | Path | None = None) -> TrainResult:
        cfg = self.cfg
        torch.manual_seed(cfg.seed)
        self.model.train()
        fine_available = bool(self.data.fine_text or self.data.fine_vision)
        use_fine = cfg.use_fine and fine_available
        period = cfg.coarse_per_fine + 1

        out_path = Path(out_dir) if out_dir is not None else None
        metrics: list[dict] = []
        metrics_file = None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            metrics_file = open(out_path / "metrics.jsonl", "w")
        try:
            for it in range(1, cfg.total_iters + 1):
                task = "fine" if use_fine and it % period == 0 else "coarse"
                step = self._coarse_step() if task == "coarse" else self._fine_step()
                loss = step.pop("loss")
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at iter {it} ({task}): {step}")
                self.opt.zero_grad()
                loss.backward()
                self.opt.step()
                self.model.head.clamp_tau()

                if it % cfg.log_every == 0 or it == cfg.total_iters:
                    row = {"iter": it, "task": task,
                           "l_r": step.get("l_r"), "l_p": step.get("l_p"),
                           "l_htn": step.get("l_htn"),
                           "l_tok_t": step.get("l_tok_t"), "l_tok_v": step.get("l_tok_v"),
                           "tau": self.model.head.tau.item()}
                    metrics.append(row)
                    if metrics_file is not None:
                        metrics_file.write(json.dumps(row, sort_keys=True) + "\n")

                if (out_path is not None and cfg.checkpoint_every > 0
                        and it % cfg.checkpoint_every == 0 and it < cfg.total_iters):
                    self._save(out_path / f"checkpoint-{it:06d}", it)
        finally:
            if metrics_file is not None:
                metrics_file.close()

        self.model.eval()
        checkpoint_dir = None
        if out_path is not None:
            checkpoint_dir = self._save(out_path / "checkpoint", cfg.total_iters)
        return TrainResult(model=self.model, metrics=metrics, checkpoint_dir=checkpoint_dir,
                           metrics_path=(out_path / "metrics.jsonl") if out_path else None)

    def _save(self, directory: Path, iteration: int) -> Path:
        if self.backbone is None:
            raise ValueError("cannot write checkpoints without the backbone description")
        return save_checkpoint(directory, self.model, self.backbone,
                               extra={"iteration": iteration, "train": self.cfg.to_dict()})


def train(model: EvaluationModel, data: TrainingData, cfg: TrainConfig,
          backbone: EmbeddingBackbone | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the multi-task schedule and return the trained model with its log."""
    return Trainer(model, data, cfg, backbone=backbone).run(out_dir)
