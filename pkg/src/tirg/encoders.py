"""Trainable encoders: a small strided CNN for rasters and a gated recurrent
cell for modification texts, plus the closed vocabulary and tokenizer.

Both encoders are pure functions of (input, parameters) built on the autodiff
tensor ops, so every path here is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .autodiff import (
    DimensionError,
    Parameter,
    Tensor,
    add,
    avg_pool_spatial,
    concat,
    conv2d,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    tanh,
    tensor,
)
from .css import COLORS, SHAPES, _COL_WORDS, _ROW_WORDS

PAD = "<pad>"
UNK = "<unk>"


@dataclass(frozen=True)
class Vocabulary:
    """Closed token set: dense indices, specials first, rest sorted."""

    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, hash=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise ValueError("Vocabulary: duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_index(self) -> int:
        return self.index[PAD]

    @property
    def unk_index(self) -> int:
        return self.index[UNK]


def build_vocabulary() -> Vocabulary:
    """Everything the modification grammar can emit, plus pad/unk."""
    words = {"add", "remove", "make", "to", "object", "big", "small"}
    words.update(COLORS)
    words.update(SHAPES)
    words.update(f"{r}-{c}" for r in _ROW_WORDS for c in _COL_WORDS)
    return Vocabulary(tokens=(PAD, UNK) + tuple(sorted(words)))


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """Lowercase, split on whitespace; hyphenated position names stay whole.
    Unknown words map to the unk index; empty text gives an empty list."""
    unk = vocab.unk_index
    return [vocab.index.get(word, unk) for word in text.lower().split()]


# ---------------------------------------------------------------------------
# image encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageEncoderConfig:
    canvas_px: int = 48
    channels: Tuple[int, ...] = (16, 32, 64)  # per-stage outputs; input is RGB
    embed_dim: int = 64
    # constant subtracted from [0,1] pixels before the first convolution;
    # centering inputs keeps mostly-white rasters from swamping the features
    # with a DC component
    input_center: float = 0.0

    def __post_init__(self):
        if not self.channels:
            raise ValueError("ImageEncoderConfig: need at least one conv stage")
        if self.embed_dim < 8:
            raise ValueError(f"ImageEncoderConfig: embed_dim must be >= 8, got {self.embed_dim}")
        if not 0.0 <= self.input_center < 1.0:
            raise ValueError(
                f"ImageEncoderConfig: input_center must be in [0, 1), got {self.input_center}")
        down = 2 ** len(self.channels)
        if self.canvas_px % down != 0 or self.canvas_px // down < 1:
            raise ValueError(
                f"ImageEncoderConfig: canvas {self.canvas_px} not divisible by {down}")

    @property
    def map_px(self) -> int:
        return self.canvas_px // 2 ** len(self.channels)


class ImageEncoder:
    """Stride-2 convolution stages with RELU, spatial mean pool, affine head.

    encode_* returns both the last feature map (for conv-mode composition)
    and the pooled embedding (for fc-mode composition and the database side).
    """

    # the projection head starts 2x wider than 1/sqrt(fan_in): mean pooling
    # leaves low-variance activations, and fresh embeddings need enough spread
    # to produce usable retrieval gradients within a short training budget
    FC_INIT_GAIN = 2.0

    def __init__(self, config: ImageEncoderConfig, seed: int, dtype=np.float32,
                 name_prefix: str = ""):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.kernels: List[Parameter] = []
        self.biases: List[Parameter] = []
        cin = 3
        for i, cout in enumerate(config.channels, start=1):
            scale = np.sqrt(2.0 / (9 * cin))
            self.kernels.append(Parameter(
                rng.normal(0.0, scale, size=(3, 3, cin, cout)).astype(dtype),
                name=f"{name_prefix}conv{i}.kernel"))
            self.biases.append(Parameter(np.zeros(cout, dtype=dtype),
                                         name=f"{name_prefix}conv{i}.bias"))
            cin = cout
        self.fc_weight = Parameter(
            rng.normal(0.0, self.FC_INIT_GAIN * np.sqrt(1.0 / cin),
                       size=(cin, config.embed_dim)).astype(dtype),
            name=f"{name_prefix}fc.weight")
        self.fc_bias = Parameter(np.zeros(config.embed_dim, dtype=dtype),
                                 name=f"{name_prefix}fc.bias")

    def parameters(self) -> Dict[str, Parameter]:
        params = list(self.kernels) + list(self.biases) + [self.fc_weight, self.fc_bias]
        return {p.name: p for p in params}

    def _as_input(self, images: np.ndarray, rank: int) -> Tensor:
        images = np.asarray(images)
        expected = (self.config.canvas_px, self.config.canvas_px, 3)
        if images.ndim != rank or images.shape[-3:] != expected:
            raise DimensionError(
                f"image shape {images.shape} does not end in {expected}")
        if images.dtype == np.uint8:
            data = images.astype(self.dtype) / 255.0
        else:
            data = images.astype(self.dtype)
            if data.size and (data.min() < 0.0 or data.max() > 1.0):
                raise ValueError("float images must have values in [0,1]")
        if self.config.input_center:
            data = data - self.config.input_center
        return tensor(data)

    def _forward(self, x: Tensor) -> Dict[str, Tensor]:
        fmap = x
        for kernel, bias in zip(self.kernels, self.biases):
            fmap = relu(conv2d(fmap, kernel, bias, stride=2, pad=1))
        pooled = add(matmul(avg_pool_spatial(fmap), self.fc_weight), self.fc_bias)
        return {"feature_map": fmap, "pooled": pooled}

    def encode_batch(self, images: np.ndarray) -> Dict[str, Tensor]:
        """[N,H,W,3] uint8 or [0,1] float -> feature_map [N,h,w,C], pooled [N,D]."""
        return self._forward(self._as_input(images, rank=4))

    def encode_image(self, img: np.ndarray) -> Dict[str, Tensor]:
        """[H,W,3] -> feature_map [h,w,C], pooled [D]."""
        x = self._as_input(img, rank=3)
        out = self._forward(reshape(x, (1,) + x.data.shape))
        h = self.config.map_px
        c = self.config.channels[-1]
        return {"feature_map": reshape(out["feature_map"], (h, h, c)),
                "pooled": reshape(out["pooled"], (self.config.embed_dim,))}


def prepare_images(imgs: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
    """Stack HxWx3 uint8 rasters into one [0,1]-scaled float batch."""
    arr = np.stack([np.asarray(im) for im in imgs])
    if arr.dtype == np.uint8:
        return (arr.astype(dtype) / 255.0).astype(dtype)
    return arr.astype(dtype)


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64

    def __post_init__(self):
        if self.vocab_size < 2 or self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("TextEncoderConfig: sizes must be positive (vocab >= 2)")


class TextEncoder:
    """Single-gate recurrent cell run left to right; the final hidden state
    is the text feature.

    Step on [h, x] (hidden state concatenated with the token embedding):
        z = sigmoid([h,x] @ W_update + b_update)
        c = tanh([h,x] @ W_candidate + b_candidate)
        h' = (1 - z) * h + z * c
    """

    # token embeddings and the candidate map start wide so the text signal is
    # strong enough to shape the composed query within a short training budget;
    # the update gate keeps the usual scale so state mixing starts neutral
    EMBEDDING_INIT_STD = 0.8
    CANDIDATE_INIT_GAIN = 2.0

    def __init__(self, config: TextEncoderConfig, seed: int, dtype=np.float32,
                 name_prefix: str = ""):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        e, d = config.embed_dim, config.hidden_dim
        gate_scale = np.sqrt(1.0 / (e + d))
        self.embedding = Parameter(
            rng.normal(0.0, self.EMBEDDING_INIT_STD, size=(config.vocab_size, e)).astype(dtype),
            name=f"{name_prefix}embedding")
        self.update_weight = Parameter(
            rng.normal(0.0, gate_scale, size=(e + d, d)).astype(dtype),
            name=f"{name_prefix}update.weight")
        self.update_bias = Parameter(np.zeros(d, dtype=dtype),
                                     name=f"{name_prefix}update.bias")
        self.candidate_weight = Parameter(
            rng.normal(0.0, self.CANDIDATE_INIT_GAIN * gate_scale, size=(e + d, d)).astype(dtype),
            name=f"{name_prefix}candidate.weight")
        self.candidate_bias = Parameter(np.zeros(d, dtype=dtype),
                                        name=f"{name_prefix}candidate.bias")

    def parameters(self) -> Dict[str, Parameter]:
        params = (self.embedding, self.update_weight, self.update_bias,
                  self.candidate_weight, self.candidate_bias)
        return {p.name: p for p in params}

    def _step(self, h: Tensor, x: Tensor) -> Tensor:
        hx = concat(h, x)
        z = sigmoid(add(matmul(hx, self.update_weight), self.update_bias))
        c = tanh(add(matmul(hx, self.candidate_weight), self.candidate_bias))
        # h' = h + z * (c - h)
        return add(h, mul(z, add(c, mul(tensor(np.asarray(-1.0, dtype=self.dtype)), h))))

    def encode_batch(self, token_rows: Sequence[Sequence[int]]) -> Tensor:
        """Ragged token id rows -> [B, hidden_dim] final states.

        Rows are padded to the longest length; a per-step mask freezes each
        row's state once its real tokens end, so padding never leaks in.
        """
        if len(token_rows) == 0:
            raise ValueError("encode_batch: empty batch")
        rows = [list(r) for r in token_rows]
        if any(len(r) == 0 for r in rows):
            raise ValueError("encode_batch: empty token list in batch")
        vocab_size = self.config.vocab_size
        for r in rows:
            if any(not (0 <= t < vocab_size) for t in r):
                raise ValueError(f"encode_batch: token id out of range 0..{vocab_size - 1}")
        b = len(rows)
        longest = max(len(r) for r in rows)
        ids = np.zeros((b, longest), dtype=np.int64)
        mask = np.zeros((b, longest), dtype=self.dtype)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = r
            mask[i, :len(r)] = 1.0
        h = tensor(np.zeros((b, self.config.hidden_dim), dtype=self.dtype))
        eye = np.eye(vocab_size, dtype=self.dtype)
        for step in range(longest):
            onehot = tensor(eye[ids[:, step]])
            x = matmul(onehot, self.embedding)
            h_new = self._step(h, x)
            gate = tensor(mask[:, step:step + 1])
            # h = h + mask * (h_new - h): finished rows keep their state
            h = add(h, mul(gate, add(h_new, mul(
                tensor(np.asarray(-1.0, dtype=self.dtype)), h))))
        return h

    def encode_text(self, token_ids: Sequence[int]) -> Tensor:
        """One token id list -> [hidden_dim] final state."""
        if len(token_ids) == 0:
            raise ValueError("encode_text: empty token list")
        out = self.encode_batch([token_ids])
        return reshape(out, (self.config.hidden_dim,))
