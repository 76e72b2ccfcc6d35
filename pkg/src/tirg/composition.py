"""Image+text query composition strategies.

Every strategy maps (image feature, text feature) to a composed feature in
the image-feature space, so retrieval can compare queries and database images
with one kernel. The gated-residual strategy ("tirg") is the mechanism under
study; concat, film, image_only, and text_only are the comparison baselines.

fc mode composes pooled vectors; conv mode composes the spatial feature map
(text broadcast to every cell, 3x3 convolutions in place of affine maps).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import (
    DimensionError,
    Parameter,
    Tensor,
    add,
    broadcast_text,
    concat,
    conv2d,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    tensor,
)

STRATEGIES = ("image_only", "text_only", "concat", "film", "tirg")
LAYER_MODES = ("fc", "conv")


def _check_layer_mode(layer_mode: str) -> None:
    if layer_mode not in LAYER_MODES:
        raise ValueError(f"layer_mode must be one of {LAYER_MODES}, got {layer_mode!r}")


def _check_dropout(dropout: float) -> None:
    if not 0.0 <= dropout < 1.0:
        raise ValueError(f"dropout must be in [0, 1), got {dropout}")


def _affine(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    return add(matmul(x, weight), bias)


def _maybe_dropout(h: Tensor, dropout: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout on a hidden activation; inactive without an rng
    (evaluation mode) or with rate 0."""
    _check_dropout(dropout)
    if dropout == 0.0 or rng is None:
        return h
    keep = (rng.random(h.data.shape) >= dropout).astype(h.data.dtype)
    return mul(h, tensor(keep / (1.0 - dropout)))


def _normalize_pair(phi_x: Tensor, phi_t: Tensor, layer_mode: str
                    ) -> Tuple[Tensor, Tensor, bool]:
    """Promote single samples to batch-of-one; returns (x, t, was_single)."""
    x_ranks = (1, 2) if layer_mode == "fc" else (3, 4)
    if phi_x.data.ndim not in x_ranks:
        raise DimensionError(
            f"image feature rank {phi_x.data.ndim} invalid for {layer_mode} mode")
    if phi_t.data.ndim not in (1, 2):
        raise DimensionError(f"text feature rank {phi_t.data.ndim}, need 1 or 2")
    x_single = phi_x.data.ndim == x_ranks[0]
    t_single = phi_t.data.ndim == 1
    x = reshape(phi_x, (1,) + phi_x.data.shape) if x_single else phi_x
    t = reshape(phi_t, (1,) + phi_t.data.shape) if t_single else phi_t
    if x.data.shape[0] != t.data.shape[0]:
        raise DimensionError(
            f"batch mismatch: {x.data.shape[0]} images vs {t.data.shape[0]} texts")
    return x, t, x_single and t_single


def _unbatch(out: Tensor, was_single: bool) -> Tensor:
    return reshape(out, out.data.shape[1:]) if was_single else out


def _init_weight(rng: np.random.Generator, fan_in: int, shape: tuple,
                 dtype, relu_gain: bool, scale: float = 1.0) -> np.ndarray:
    std = np.sqrt((2.0 if relu_gain else 1.0) / fan_in) * scale
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _two_layer_shapes(image_dim: int, text_dim: int, hidden_dim: Optional[int],
                      layer_mode: str):
    hidden = hidden_dim if hidden_dim is not None else image_dim + text_dim
    if hidden < 1:
        raise ValueError(f"hidden_dim must be >= 1, got {hidden}")
    cin = image_dim + text_dim
    if layer_mode == "fc":
        w1, w2 = (cin, hidden), (hidden, image_dim)
        fan1, fan2 = cin, hidden
    else:
        w1, w2 = (3, 3, cin, hidden), (3, 3, hidden, image_dim)
        fan1, fan2 = 9 * cin, 9 * hidden
    return hidden, w1, w2, fan1, fan2


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class TIRGParams:
    """Gated-residual composition: sigmoid-gated copy of the image feature
    plus a learned residual delta, balanced by two trainable scalars."""

    layer_mode: str
    gate_hidden_weight: Parameter
    gate_hidden_bias: Parameter
    gate_out_weight: Parameter
    gate_out_bias: Parameter
    residual_hidden_weight: Parameter
    residual_hidden_bias: Parameter
    residual_out_weight: Parameter
    residual_out_bias: Parameter
    balance_gate: Parameter
    balance_residual: Parameter

    # the residual output layer starts 5x smaller than a standard init so a
    # fresh model is dominated by the gated image path (identity contribution
    # above 0.9); the residual then has to earn its influence during training
    RESIDUAL_INIT_SCALE = 0.2

    # the gate bias starts positive (sigmoid(2) ~ 0.88) so a fresh model passes
    # the image feature through nearly unattenuated, the usual open-gate
    # initialization for gated units
    GATE_BIAS_INIT = 2.0

    @classmethod
    def init(cls, image_dim: int, text_dim: int, layer_mode: str = "fc",
             hidden_dim: Optional[int] = None, seed: int = 0,
             dtype=np.float32, name_prefix: str = "") -> "TIRGParams":
        _check_layer_mode(layer_mode)
        hidden, w1, w2, fan1, fan2 = _two_layer_shapes(
            image_dim, text_dim, hidden_dim, layer_mode)
        rng = np.random.default_rng(seed)

        def param(tag, array):
            return Parameter(array, name=f"{name_prefix}{tag}")

        return cls(
            layer_mode=layer_mode,
            gate_hidden_weight=param("gate_hidden.weight",
                                     _init_weight(rng, fan1, w1, dtype, relu_gain=True)),
            gate_hidden_bias=param("gate_hidden.bias", np.zeros(hidden, dtype=dtype)),
            gate_out_weight=param("gate_out.weight",
                                  _init_weight(rng, fan2, w2, dtype, relu_gain=False)),
            gate_out_bias=param("gate_out.bias",
                                np.full(image_dim, cls.GATE_BIAS_INIT, dtype=dtype)),
            residual_hidden_weight=param("residual_hidden.weight",
                                         _init_weight(rng, fan1, w1, dtype, relu_gain=True)),
            residual_hidden_bias=param("residual_hidden.bias", np.zeros(hidden, dtype=dtype)),
            residual_out_weight=param("residual_out.weight",
                                      _init_weight(rng, fan2, w2, dtype, relu_gain=False,
                                                   scale=cls.RESIDUAL_INIT_SCALE)),
            residual_out_bias=param("residual_out.bias", np.zeros(image_dim, dtype=dtype)),
            balance_gate=param("balance.gate", np.asarray(1.0, dtype=dtype)),
            balance_residual=param("balance.residual", np.asarray(0.1, dtype=dtype)),
        )

    def parameters(self) -> Dict[str, Parameter]:
        params = (self.gate_hidden_weight, self.gate_hidden_bias,
                  self.gate_out_weight, self.gate_out_bias,
                  self.residual_hidden_weight, self.residual_hidden_bias,
                  self.residual_out_weight, self.residual_out_bias,
                  self.balance_gate, self.balance_residual)
        return {p.name: p for p in params}


@dataclass
class ConcatParams:
    """Two-layer map of the concatenated features back to image space.

    Initialization is a mirrored identity: the first 2k hidden units hold +x
    and -x copies of the image feature (RELU keeps both signs) and the output
    layer subtracts them back together, so a fresh map reproduces the image
    feature exactly. Everything else starts as low-amplitude noise the text
    pathway can grow into. Without the identity start, the map has to relearn
    image geometry from scratch and short training runs never recover it.
    """

    layer_mode: str
    hidden_weight: Parameter
    hidden_bias: Parameter
    out_weight: Parameter
    out_bias: Parameter

    MIRROR_NOISE_SCALE = 0.05

    @classmethod
    def init(cls, image_dim: int, text_dim: int, layer_mode: str = "fc",
             hidden_dim: Optional[int] = None, seed: int = 0,
             dtype=np.float32, name_prefix: str = "") -> "ConcatParams":
        _check_layer_mode(layer_mode)
        hidden, w1, w2, fan1, fan2 = _two_layer_shapes(
            image_dim, text_dim, hidden_dim, layer_mode)
        rng = np.random.default_rng(seed)
        a1 = _init_weight(rng, fan1, w1, dtype, relu_gain=True,
                          scale=cls.MIRROR_NOISE_SCALE)
        a2 = _init_weight(rng, fan2, w2, dtype, relu_gain=False,
                          scale=cls.MIRROR_NOISE_SCALE)
        k = min(image_dim, hidden // 2)
        eye_in = np.eye(image_dim, k, dtype=dtype)
        eye_out = np.eye(k, image_dim, dtype=dtype)
        if layer_mode == "fc":
            w1_image, w2_full = a1[:image_dim], a2
        else:
            w1_image, w2_full = a1[1, 1, :image_dim], a2[1, 1]  # center taps
        w1_image[:, :k] += eye_in
        w1_image[:, k:2 * k] -= eye_in
        w2_full[:k, :] += eye_out
        w2_full[k:2 * k, :] -= eye_out
        return cls(
            layer_mode=layer_mode,
            hidden_weight=Parameter(a1, name=f"{name_prefix}hidden.weight"),
            hidden_bias=Parameter(np.zeros(hidden, dtype=dtype),
                                  name=f"{name_prefix}hidden.bias"),
            out_weight=Parameter(a2, name=f"{name_prefix}out.weight"),
            out_bias=Parameter(np.zeros(image_dim, dtype=dtype),
                               name=f"{name_prefix}out.bias"),
        )

    def parameters(self) -> Dict[str, Parameter]:
        params = (self.hidden_weight, self.hidden_bias, self.out_weight, self.out_bias)
        return {p.name: p for p in params}


@dataclass
class FiLMParams:
    """Affine heads reading per-channel scale and shift off the text feature;
    scale bias starts at 1 so modulation begins near identity."""

    scale_weight: Parameter
    scale_bias: Parameter
    shift_weight: Parameter
    shift_bias: Parameter

    @classmethod
    def init(cls, image_dim: int, text_dim: int, seed: int = 0,
             dtype=np.float32, name_prefix: str = "") -> "FiLMParams":
        rng = np.random.default_rng(seed)
        return cls(
            scale_weight=Parameter(
                _init_weight(rng, text_dim, (text_dim, image_dim), dtype, relu_gain=False),
                name=f"{name_prefix}scale.weight"),
            scale_bias=Parameter(np.ones(image_dim, dtype=dtype),
                                 name=f"{name_prefix}scale.bias"),
            shift_weight=Parameter(
                _init_weight(rng, text_dim, (text_dim, image_dim), dtype, relu_gain=False),
                name=f"{name_prefix}shift.weight"),
            shift_bias=Parameter(np.zeros(image_dim, dtype=dtype),
                                 name=f"{name_prefix}shift.bias"),
        )

    def parameters(self) -> Dict[str, Parameter]:
        params = (self.scale_weight, self.scale_bias, self.shift_weight, self.shift_bias)
        return {p.name: p for p in params}


@dataclass
class TextOnlyParams:
    """Linear projection of the text feature into image space (the two
    feature sizes differ in general)."""

    project_weight: Parameter
    project_bias: Parameter

    @classmethod
    def init(cls, image_dim: int, text_dim: int, seed: int = 0,
             dtype=np.float32, name_prefix: str = "") -> "TextOnlyParams":
        rng = np.random.default_rng(seed)
        return cls(
            project_weight=Parameter(
                _init_weight(rng, text_dim, (text_dim, image_dim), dtype, relu_gain=False),
                name=f"{name_prefix}project.weight"),
            project_bias=Parameter(np.zeros(image_dim, dtype=dtype),
                                   name=f"{name_prefix}project.bias"),
        )

    def parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in (self.project_weight, self.project_bias)}


# ---------------------------------------------------------------------------
# compose operations
# ---------------------------------------------------------------------------


def _two_layer(joint: Tensor, w1: Parameter, b1: Parameter, w2: Parameter,
               b2: Parameter, layer_mode: str, dropout: float,
               rng: Optional[np.random.Generator]) -> Tensor:
    if layer_mode == "fc":
        hidden = relu(_affine(joint, w1, b1))
        hidden = _maybe_dropout(hidden, dropout, rng)
        return _affine(hidden, w2, b2)
    hidden = relu(conv2d(joint, w1, b1, stride=1, pad=1))
    hidden = _maybe_dropout(hidden, dropout, rng)
    return conv2d(hidden, w2, b2, stride=1, pad=1)


def _joint_feature(x: Tensor, t: Tensor, layer_mode: str) -> Tensor:
    if layer_mode == "fc":
        return concat(x, t)
    h, w = x.data.shape[1], x.data.shape[2]
    return concat(x, broadcast_text(t, (h, w)))


def _tirg_paths(phi_x: Tensor, phi_t: Tensor, params: TIRGParams,
                dropout: float = 0.0, rng: Optional[np.random.Generator] = None
                ) -> Tuple[Tensor, Tensor, bool]:
    """(f_gate, f_res, was_single) for the two composition paths."""
    x, t, was_single = _normalize_pair(phi_x, phi_t, params.layer_mode)
    joint = _joint_feature(x, t, params.layer_mode)
    gate_pre = _two_layer(joint, params.gate_hidden_weight, params.gate_hidden_bias,
                          params.gate_out_weight, params.gate_out_bias,
                          params.layer_mode, dropout, rng)
    f_gate = mul(sigmoid(gate_pre), x)
    f_res = _two_layer(joint, params.residual_hidden_weight, params.residual_hidden_bias,
                       params.residual_out_weight, params.residual_out_bias,
                       params.layer_mode, dropout, rng)
    return f_gate, f_res, was_single


def compose_tirg(phi_x: Tensor, phi_t: Tensor, params: TIRGParams,
                 dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """balance_gate * (sigmoid(gate path) * phi_x) + balance_residual * residual path."""
    f_gate, f_res, was_single = _tirg_paths(phi_x, phi_t, params, dropout, rng)
    out = add(mul(params.balance_gate, f_gate), mul(params.balance_residual, f_res))
    return _unbatch(out, was_single)


def compose_concat(phi_x: Tensor, phi_t: Tensor, params: ConcatParams,
                   dropout: float = 0.0,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Two-layer map (RELU hidden, linear out) of the concatenated features."""
    x, t, was_single = _normalize_pair(phi_x, phi_t, params.layer_mode)
    joint = _joint_feature(x, t, params.layer_mode)
    out = _two_layer(joint, params.hidden_weight, params.hidden_bias,
                     params.out_weight, params.out_bias,
                     params.layer_mode, dropout, rng)
    return _unbatch(out, was_single)


def compose_film(phi_x: Tensor, phi_t: Tensor, params: FiLMParams) -> Tensor:
    """Per-channel affine modulation of the image feature by the text."""
    layer_mode = "fc" if phi_x.data.ndim <= 2 else "conv"
    x, t, was_single = _normalize_pair(phi_x, phi_t, layer_mode)
    channels = params.scale_bias.data.shape[0]
    if x.data.shape[-1] != channels:
        raise DimensionError(
            f"film: image channels {x.data.shape[-1]} vs heads {channels}")
    gamma = _affine(t, params.scale_weight, params.scale_bias)
    beta = _affine(t, params.shift_weight, params.shift_bias)
    if layer_mode == "conv":
        n = x.data.shape[0]
        gamma = reshape(gamma, (n, 1, 1, channels))
        beta = reshape(beta, (n, 1, 1, channels))
    return _unbatch(add(mul(gamma, x), beta), was_single)


def compose_image_only(phi_x: Tensor, phi_t: Tensor) -> Tensor:
    """The unmodified image feature (text ignored)."""
    return phi_x


def compose_text_only(phi_x: Tensor, phi_t: Tensor, params: TextOnlyParams) -> Tensor:
    """Projected text feature; in conv mode it is broadcast to the image
    feature's spatial grid so the output stays in image-feature space."""
    layer_mode = "fc" if phi_x.data.ndim <= 2 else "conv"
    x, t, was_single = _normalize_pair(phi_x, phi_t, layer_mode)
    projected = _affine(t, params.project_weight, params.project_bias)
    if layer_mode == "conv":
        h, w = x.data.shape[1], x.data.shape[2]
        projected = broadcast_text(projected, (h, w))
    return _unbatch(projected, was_single)


def identity_contribution(phi_x: Tensor, phi_t: Tensor, params: TIRGParams
                          ) -> Tuple[float, bool]:
    """Fraction of the composed feature carried by the gated image path:
    |g| / (|g| + |r|) with g, r the two balanced path outputs, averaged over
    the batch. A sample with |g| + |r| = 0 counts as 0.5 and flips the
    degenerate flag."""
    f_gate, f_res, _ = _tirg_paths(phi_x, phi_t, params)
    g = params.balance_gate.data.item() * f_gate.data
    r = params.balance_residual.data.item() * f_res.data
    axes = tuple(range(1, g.ndim))
    g_norm = np.sqrt((g * g).sum(axis=axes))
    r_norm = np.sqrt((r * r).sum(axis=axes))
    total = g_norm + r_norm
    degenerate = bool((total == 0.0).any())
    fractions = np.where(total == 0.0, 0.5, g_norm / np.where(total == 0.0, 1.0, total))
    return float(fractions.mean()), degenerate


# ---------------------------------------------------------------------------
# strategy wrapper
# ---------------------------------------------------------------------------


class CompositionStrategy:
    """One named composition mechanism with its parameters, selected by the
    config strings in STRATEGIES."""

    def __init__(self, name: str, layer_mode: str, dropout: float, params_obj):
        self.name = name
        self.layer_mode = layer_mode
        self.dropout = dropout
        self._params_obj = params_obj

    def parameters(self) -> Dict[str, Parameter]:
        if self._params_obj is None:
            return {}
        return self._params_obj.parameters()

    def compose(self, phi_x: Tensor, phi_t: Tensor,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.name == "tirg":
            return compose_tirg(phi_x, phi_t, self._params_obj, self.dropout, rng)
        if self.name == "concat":
            return compose_concat(phi_x, phi_t, self._params_obj, self.dropout, rng)
        if self.name == "film":
            return compose_film(phi_x, phi_t, self._params_obj)
        if self.name == "text_only":
            return compose_text_only(phi_x, phi_t, self._params_obj)
        return compose_image_only(phi_x, phi_t)

    def identity_contribution(self, phi_x: Tensor, phi_t: Tensor) -> Tuple[float, bool]:
        if self.name != "tirg":
            raise ValueError(
                f"identity contribution is defined for the tirg strategy only, not {self.name}")
        return identity_contribution(phi_x, phi_t, self._params_obj)


def make_strategy(name: str, image_dim: int, text_dim: int, layer_mode: str = "fc",
                  hidden_dim: Optional[int] = None, dropout: float = 0.0,
                  seed: int = 0, dtype=np.float32,
                  name_prefix: str = "compose.") -> CompositionStrategy:
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose one of {', '.join(STRATEGIES)}")
    _check_layer_mode(layer_mode)
    _check_dropout(dropout)
    if name == "tirg":
        params = TIRGParams.init(image_dim, text_dim, layer_mode, hidden_dim,
                                 seed, dtype, name_prefix)
    elif name == "concat":
        params = ConcatParams.init(image_dim, text_dim, layer_mode, hidden_dim,
                                   seed, dtype, name_prefix)
    elif name == "film":
        params = FiLMParams.init(image_dim, text_dim, seed, dtype, name_prefix)
    elif name == "text_only":
        params = TextOnlyParams.init(image_dim, text_dim, seed, dtype, name_prefix)
    else:
        params = None
    return CompositionStrategy(name, layer_mode, dropout, params)
