"""The retrieval model: image encoder + text encoder + composition strategy.

Two embedding paths share one feature space:
  - embed_images: database side, image only.
  - compose_queries: query side, image feature composed with the text.
In fc mode both paths go through the pooled affine head; in conv mode the
composition runs on the spatial feature map and is pooled afterwards, and the
database embedding is the pooled raw feature map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Parameter, Tensor, avg_pool_spatial
from .checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .composition import STRATEGIES, make_strategy
from .css import PIXEL_MEAN
from .encoders import (
    ImageEncoder,
    ImageEncoderConfig,
    TextEncoder,
    TextEncoderConfig,
    Vocabulary,
)


@dataclass(frozen=True)
class ModelConfig:
    strategy: str = "tirg"
    layer_mode: str = "fc"
    canvas_px: int = 48
    image_channels: Tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    text_embed_dim: int = 32
    text_hidden_dim: int = 64
    compose_hidden_dim: Optional[int] = None
    dropout: float = 0.0
    input_center: float = PIXEL_MEAN

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy {self.strategy!r}; choose one of {', '.join(STRATEGIES)}")


class RetrievalModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int,
                 dtype=np.float32):
        self.config = config
        self.vocab = vocab
        self.dtype = dtype
        self.image_encoder = ImageEncoder(
            ImageEncoderConfig(canvas_px=config.canvas_px,
                               channels=config.image_channels,
                               embed_dim=config.embed_dim,
                               input_center=config.input_center),
            seed=seed, dtype=dtype, name_prefix="image.")
        self.text_encoder = TextEncoder(
            TextEncoderConfig(vocab_size=len(vocab),
                              embed_dim=config.text_embed_dim,
                              hidden_dim=config.text_hidden_dim),
            seed=seed + 1, dtype=dtype, name_prefix="text.")
        # conv mode composes the feature map, so the image-feature dim the
        # strategy sees is the last conv channel count, not the pooled dim
        image_feature_dim = (config.embed_dim if config.layer_mode == "fc"
                             else config.image_channels[-1])
        self.strategy = make_strategy(
            config.strategy, image_dim=image_feature_dim,
            text_dim=config.text_hidden_dim, layer_mode=config.layer_mode,
            hidden_dim=config.compose_hidden_dim, dropout=config.dropout,
            seed=seed + 2, dtype=dtype, name_prefix="compose.")

    @property
    def embedding_dim(self) -> int:
        if self.config.layer_mode == "fc":
            return self.config.embed_dim
        return self.config.image_channels[-1]

    def parameters(self) -> Dict[str, Parameter]:
        merged: Dict[str, Parameter] = {}
        for group in (self.image_encoder.parameters(), self.text_encoder.parameters(),
                      self.strategy.parameters()):
            for name, param in group.items():
                if name in merged:
                    raise ValueError(f"duplicate parameter name {name!r}")
                merged[name] = param
        return merged

    def embed_images(self, images: np.ndarray) -> Tensor:
        """Database-side embedding: [N,H,W,3] -> [N, embedding_dim]."""
        encoded = self.image_encoder.encode_batch(images)
        if self.config.layer_mode == "fc":
            return encoded["pooled"]
        return avg_pool_spatial(encoded["feature_map"])

    def _image_feature(self, images: np.ndarray) -> Tensor:
        encoded = self.image_encoder.encode_batch(images)
        return (encoded["pooled"] if self.config.layer_mode == "fc"
                else encoded["feature_map"])

    def compose_queries(self, images: np.ndarray, token_rows: Sequence[Sequence[int]],
                        rng: Optional[np.random.Generator] = None) -> Tensor:
        """Query-side embedding: compose each image with its text row."""
        phi_x = self._image_feature(images)
        phi_t = self.text_encoder.encode_batch(token_rows)
        composed = self.strategy.compose(phi_x, phi_t, rng=rng)
        if self.config.layer_mode == "conv":
            composed = avg_pool_spatial(composed)
        return composed

    def identity_contribution(self, images: np.ndarray,
                              token_rows: Sequence[Sequence[int]]) -> Tuple[float, bool]:
        """Gated-path share of the composed feature (tirg strategy only)."""
        phi_x = self._image_feature(images)
        phi_t = self.text_encoder.encode_batch(token_rows)
        return self.strategy.identity_contribution(phi_x, phi_t)

    def save(self, path) -> None:
        save_checkpoint(list(self.parameters().values()), path)

    def load(self, path) -> None:
        assign_parameters(list(self.parameters().values()), load_checkpoint(path))
