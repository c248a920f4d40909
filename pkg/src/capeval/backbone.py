"""Embedding backbones: frozen encoders that map images and token sequences to unit vectors.

The evaluation model never updates a backbone; it only reads its outputs.
Two implementations are provided: a deterministic synthetic backbone for
desk-scale runs and tests, and a thin adapter for a real pretrained
contrastive vision-language checkpoint.
"""

from __future__ import annotations

import hashlib
import json
from typing import Protocol, Sequence, runtime_checkable

import numpy as np


@runtime_checkable
class EmbeddingBackbone(Protocol):
    """Contract every backbone must satisfy.

    Outputs are finite, L2-normalized vectors of dimension ``dim`` and are
    deterministic: identical input yields identical output bit for bit.
    ``logit_temperature`` is the backbone's own contrastive temperature
    (used by the "+" score variant); ``None`` if the backbone has none.
    """

    dim: int
    logit_temperature: float | None

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text_sequence(self, tokens: Sequence[str]) -> np.ndarray: ...

    def state_digest(self) -> str: ...


class BackboneError(ValueError):
    pass


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BackboneError(f"expected an RGB array of shape (H, W, 3), got {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise BackboneError("empty image")
    return np.ascontiguousarray(image, dtype=np.uint8)


class SyntheticBackbone:
    """Deterministic stand-in for a pretrained contrastive encoder.

    Images are split into fixed-size tiles; each tile's pixel content is
    hashed into a seed that draws a fixed Gaussian vector, and the tile
    vectors are averaged and L2-normalized. Large uniform areas therefore
    dominate the global image vector, which mimics the salience behaviour
    of a real backbone: the embedding of a whole image is (approximately)
    the area-weighted mix of its parts, and a crop containing one object
    embeds near that object's canonical vector.

    Text tokens are hashed individually; a sequence embeds to the
    normalized sum of its token vectors. Encoding a one-token sequence is
    therefore free of any sentence context by construction.

    Everything is derived from ``seed``; no state mutates after
    construction, so instances are safe to share across threads.
    """

    def __init__(self, dim: int = 16, seed: int = 0, tile: int = 8,
                 logit_temperature: float | None = 0.01):
        if dim < 1 or tile < 1:
            raise BackboneError("dim and tile must be positive")
        self.dim = dim
        self.seed = seed
        self.tile = tile
        self.logit_temperature = logit_temperature
        self._salt = f"capeval-backbone:{seed}".encode()
        # caches are pure memoization of deterministic functions
        self._tile_cache: dict[bytes, np.ndarray] = {}
        self._token_cache: dict[str, np.ndarray] = {}

    def _vector_for(self, payload: bytes, cache: dict | None = None,
                    cache_key=None) -> np.ndarray:
        if cache is not None and cache_key in cache:
            return cache[cache_key]
        digest = hashlib.blake2b(payload, digest_size=8, key=self._salt[:16]).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vec = rng.standard_normal(self.dim)
        if cache is not None:
            cache[cache_key] = vec
        return vec

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = _check_image(image)
        h, w = image.shape[:2]
        acc = np.zeros(self.dim)
        for y0 in range(0, h, self.tile):
            for x0 in range(0, w, self.tile):
                block = image[y0:y0 + self.tile, x0:x0 + self.tile]
                payload = b"img:%d:%d:" % block.shape[:2] + block.tobytes()
                key = hashlib.blake2b(payload, digest_size=16).digest()
                acc += self._vector_for(payload, self._tile_cache, key)
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            raise BackboneError("degenerate image embedding")
        return (acc / norm).astype(np.float32)

    def embed_text_sequence(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) == 0:
            raise BackboneError("empty token sequence")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._vector_for(b"txt:" + str(tok).encode(), self._token_cache, str(tok))
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            raise BackboneError("degenerate text embedding")
        return (acc / norm).astype(np.float32)

    def state_digest(self) -> str:
        blob = json.dumps({"kind": "synthetic", "dim": self.dim, "seed": self.seed,
                           "tile": self.tile, "logit_temperature": self.logit_temperature},
                          sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=16).hexdigest()

    def describe(self) -> dict:
        return {"kind": "synthetic", "dim": self.dim, "seed": self.seed,
                "tile": self.tile, "logit_temperature": self.logit_temperature}


class PretrainedClipBackbone:
    """Adapter binding a real pretrained contrastive vision-language encoder.

    Requires the ``transformers`` package and locally available weights.
    Per-token features are produced by encoding each token as its own
    one-token sequence; the tokenizer's usual begin/end markers are kept
    around the single token, since that is the framing the text encoder
    saw during pretraining.
    """

    def __init__(self, model_name_or_path: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - depends on env
            raise BackboneError(
                "pretrained backbone needs the 'transformers' package") from exc
        self._torch = torch
        try:
            self.model = CLIPModel.from_pretrained(model_name_or_path).eval().to(device)
            self.processor = CLIPProcessor.from_pretrained(model_name_or_path)
        except Exception as exc:
            raise BackboneError(
                f"cannot load pretrained backbone {model_name_or_path!r}: {exc}") from exc
        self.device = device
        self.dim = int(self.model.config.projection_dim)
        self.logit_temperature = float(1.0 / self.model.logit_scale.exp().item())
        self._name = str(model_name_or_path)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image

        image = _check_image(image)
        inputs = self.processor(images=Image.fromarray(image), return_tensors="pt")
        with self._torch.no_grad():
            feat = self.model.get_image_features(pixel_values=inputs["pixel_values"].to(self.device))
        vec = feat[0].cpu().numpy().astype(np.float32)
        return vec / np.linalg.norm(vec)

    def embed_text_sequence(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) == 0:
            raise BackboneError("empty token sequence")
        inputs = self.processor(text=" ".join(tokens), return_tensors="pt",
                                padding=True, truncation=True)
        with self._torch.no_grad():
            feat = self.model.get_text_features(
                input_ids=inputs["input_ids"].to(self.device),
                attention_mask=inputs["attention_mask"].to(self.device))
        vec = feat[0].cpu().numpy().astype(np.float32)
        return vec / np.linalg.norm(vec)

    def state_digest(self) -> str:
        params = sorted((n, tuple(p.shape)) for n, p in self.model.named_parameters())
        blob = json.dumps({"name": self._name, "params": params}, sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=16).hexdigest()

    def describe(self) -> dict:
        return {"kind": "pretrained-adapter", "model": self._name, "dim": self.dim,
                "logit_temperature": self.logit_temperature}


def build_backbone(spec: dict) -> EmbeddingBackbone:
    """Construct a backbone from its ``describe()`` dictionary."""
    kind = spec.get("kind")
    if kind == "synthetic":
        return SyntheticBackbone(dim=int(spec["dim"]), seed=int(spec.get("seed", 0)),
                                 tile=int(spec.get("tile", 8)),
                                 logit_temperature=spec.get("logit_temperature"))
    if kind == "pretrained-adapter":
        return PretrainedClipBackbone(spec["model"])
    raise BackboneError(f"unknown backbone kind: {kind!r}")
