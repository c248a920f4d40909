"""Intra- and inter-modality fusion.

Two intra-modal transformer stacks contextualize the vision and text token
sequences separately; an inter-modal stack then runs full cross attention
over their concatenation. Region tokens receive box-derived position
features (a linear map of the normalized box), so the vision side is
permutation equivariant; text positions are index-based learned embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .encoding import MAX_TEXT_LEN, CaptionTokenFeatures, ImageTokenFeatures


@dataclass
class FusionConfig:
    dim: int = 512
    n_intra_layers: int = 4
    n_inter_layers: int = 2
    n_heads: int = 8
    max_text_len: int = MAX_TEXT_LEN
    ffn_mult: int = 4
    dropout: float = 0.1
    # keep the global vision token in the fused sequences (off = ablation)
    use_global_vision: bool = True

    def __post_init__(self):
        if min(self.dim, self.n_intra_layers, self.n_inter_layers,
               self.n_heads, self.max_text_len, self.ffn_mult) < 1:
            raise ValueError("all fusion config counts must be >= 1")
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return {"dim": self.dim, "n_intra_layers": self.n_intra_layers,
                "n_inter_layers": self.n_inter_layers, "n_heads": self.n_heads,
                "max_text_len": self.max_text_len, "ffn_mult": self.ffn_mult,
                "dropout": self.dropout, "use_global_vision": self.use_global_vision}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


@dataclass
class FusedFeatures:
    """Single-pair fusion output: regions-then-null on the vision side."""

    vision_out: torch.Tensor            # (m+1, d), last row is the null token
    text_out: torch.Tensor              # (n, d)
    vision_global_out: torch.Tensor | None  # (d,) fused global slot, unused by scoring


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim),
            nn.GELU(),
            nn.Linear(ffn_mult * dim, dim),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.drop(attn_out)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class EncoderStack(nn.Module):
    def __init__(self, n_layers: int, dim: int, n_heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(dim, n_heads, ffn_mult, dropout) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


@dataclass
class PairBatch:
    """Padded tensors for a batch of image-caption pairs."""

    region_feats: torch.Tensor   # (B, M, d)
    norm_boxes: torch.Tensor     # (B, M, 4)
    region_mask: torch.Tensor    # (B, M) bool, True where a region exists
    vision_global: torch.Tensor  # (B, d)
    token_feats: torch.Tensor    # (B, N, d)
    token_mask: torch.Tensor     # (B, N) bool
    text_global: torch.Tensor    # (B, d)
    semantic_mask: torch.Tensor = field(default=None)  # (B, N) bool, optional

    @property
    def batch_size(self) -> int:
        return self.region_feats.shape[0]


def collate_pairs(pairs: list[tuple[ImageTokenFeatures, CaptionTokenFeatures]],
                  dtype: torch.dtype = torch.float32) -> PairBatch:
    b = len(pairs)
    d = pairs[0][0].dim
    max_m = max(img.num_regions for img, _ in pairs)
    max_n = max(cap.num_tokens for _, cap in pairs)
    region_feats = torch.zeros(b, max_m, d, dtype=dtype)
    norm_boxes = torch.zeros(b, max_m, 4, dtype=dtype)
    region_mask = torch.zeros(b, max_m, dtype=torch.bool)
    vision_global = torch.zeros(b, d, dtype=dtype)
    token_feats = torch.zeros(b, max_n, d, dtype=dtype)
    token_mask = torch.zeros(b, max_n, dtype=torch.bool)
    semantic_mask = torch.zeros(b, max_n, dtype=torch.bool)
    text_global = torch.zeros(b, d, dtype=dtype)
    for i, (img, cap) in enumerate(pairs):
        m, n = img.num_regions, cap.num_tokens
        region_feats[i, :m] = torch.as_tensor(img.region_feats, dtype=dtype)
        norm_boxes[i, :m] = torch.as_tensor(img.norm_boxes, dtype=dtype)
        region_mask[i, :m] = True
        vision_global[i] = torch.as_tensor(img.global_feat, dtype=dtype)
        token_feats[i, :n] = torch.as_tensor(cap.token_feats, dtype=dtype)
        token_mask[i, :n] = True
        semantic_mask[i, :n] = torch.as_tensor(cap.semantic_mask)
        text_global[i] = torch.as_tensor(cap.global_feat, dtype=dtype)
    return PairBatch(region_feats=region_feats, norm_boxes=norm_boxes,
                     region_mask=region_mask, vision_global=vision_global,
                     token_feats=token_feats, token_mask=token_mask,
                     text_global=text_global, semantic_mask=semantic_mask)


@dataclass
class FusionOutput:
    """Batched fusion output; padded rows are garbage and must stay masked."""

    regions: torch.Tensor            # (B, M, d)
    null: torch.Tensor               # (B, d)
    text: torch.Tensor               # (B, N, d)
    global_slot: torch.Tensor | None  # (B, d)


class FusionModule(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.box_position = nn.Linear(4, d)
        # the global and null tokens carry no box; each gets one learned offset
        self.global_position = nn.Parameter(torch.empty(d))
        self.null_position = nn.Parameter(torch.empty(d))
        self.text_position = nn.Parameter(torch.empty(cfg.max_text_len, d))
        nn.init.normal_(self.global_position, std=0.02)
        nn.init.normal_(self.null_position, std=0.02)
        nn.init.normal_(self.text_position, std=0.02)
        self.intra_vision = EncoderStack(cfg.n_intra_layers, d, cfg.n_heads,
                                         cfg.ffn_mult, cfg.dropout)
        self.intra_text = EncoderStack(cfg.n_intra_layers, d, cfg.n_heads,
                                       cfg.ffn_mult, cfg.dropout)
        self.inter = EncoderStack(cfg.n_inter_layers, d, cfg.n_heads,
                                  cfg.ffn_mult, cfg.dropout)

    def add_vision_positions(self, batch: PairBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Build the (global, regions..., null) sequence with position features."""
        b, m, _ = batch.region_feats.shape
        regions = batch.region_feats + self.box_position(batch.norm_boxes)
        null_tok = self.null_position.expand(b, 1, -1)
        ones = torch.ones(b, 1, dtype=torch.bool, device=regions.device)
        if self.cfg.use_global_vision:
            global_tok = (batch.vision_global + self.global_position).unsqueeze(1)
            seq = torch.cat([global_tok, regions, null_tok], dim=1)
            mask = torch.cat([ones, batch.region_mask, ones], dim=1)
        else:
            seq = torch.cat([regions, null_tok], dim=1)
            mask = torch.cat([batch.region_mask, ones], dim=1)
        return seq, mask

    def add_text_positions(self, batch: PairBatch) -> torch.Tensor:
        n = batch.token_feats.shape[1]
        if n > self.cfg.max_text_len:
            raise ValueError(f"caption length {n} exceeds max_text_len {self.cfg.max_text_len}")
        return batch.token_feats + self.text_position[:n]

    def forward(self, batch: PairBatch) -> FusionOutput:
        vis_seq, vis_mask = self.add_vision_positions(batch)
        txt_seq = self.add_text_positions(batch)
        vis = self.intra_vision(vis_seq, ~vis_mask)
        txt = self.intra_text(txt_seq, ~batch.token_mask)
        joint = torch.cat([vis, txt], dim=1)
        joint_mask = torch.cat([vis_mask, batch.token_mask], dim=1)
        joint = self.inter(joint, ~joint_mask)
        m = batch.region_feats.shape[1]
        offset = 1 if self.cfg.use_global_vision else 0
        return FusionOutput(
            regions=joint[:, offset:offset + m],
            null=joint[:, offset + m],
            text=joint[:, offset + m + 1:],
            global_slot=joint[:, 0] if self.cfg.use_global_vision else None,
        )


def fuse(img: ImageTokenFeatures, cap: CaptionTokenFeatures,
         module: FusionModule) -> FusedFeatures:
    """Run one image-caption pair through fusion in eval mode."""
    was_training = module.training
    module.eval()
    try:
        dtype = next(module.parameters()).dtype
        batch = collate_pairs([(img, cap)], dtype=dtype)
        with torch.no_grad():
            out = module(batch)
    finally:
        module.train(was_training)
    vision_out = torch.cat([out.regions[0], out.null[0].unsqueeze(0)], dim=0)
    global_out = out.global_slot[0] if out.global_slot is not None else None
    return FusedFeatures(vision_out=vision_out, text_out=out.text[0],
                         vision_global_out=global_out)
