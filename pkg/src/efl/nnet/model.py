"""Spectrogram encoder with an external-attention block, projection and heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from .autodiff import (
    Tensor,
    as_tensor,
    conv2d,
    l1_normalize,
    l2_normalize,
    relu,
    reshape,
    softmax,
    transpose,
)
from .optim import ParamStore

NORM_MODES = ("double_norm", "softmax_only")


@dataclass
class ConvLayer:
    channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        if self.channels < 1 or min(self.kernel) < 1 or min(self.stride) < 1:
            raise ConfigError("conv channels, kernel and stride must be >= 1")


def _default_convs():
    return [ConvLayer(8, (3, 3), (1, 2)), ConvLayer(16, (3, 3), (1, 2)),
            ConvLayer(32, (3, 3), (2, 2)), ConvLayer(32, (3, 3), (2, 2))]


@dataclass
class EncoderConfig:
    input_shape: Tuple[int, int] = (11, 90)
    convs: List[ConvLayer] = field(default_factory=_default_convs)
    memory_slots: int = 64
    embed_dim: int = 128
    proj_hidden: int = 128
    proj_dim: int = 64
    n_classes: int = 6
    attention_norm: str = "double_norm"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.convs = [c if isinstance(c, ConvLayer) else ConvLayer(**c) for c in self.convs]
        dims = (*self.input_shape, self.memory_slots, self.embed_dim, self.proj_hidden,
                self.proj_dim, self.n_classes)
        if min(dims) < 1:
            raise ConfigError("all encoder dimensions must be >= 1")
        if self.attention_norm not in NORM_MODES:
            raise ConfigError(f"attention_norm must be one of {NORM_MODES}")

    def feature_map_shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) after the conv stack."""
        c, (h, w) = 1, self.input_shape
        for layer in self.convs:
            kh, kw = layer.kernel
            sh, sw = layer.stride
            h = (h + 2 * (kh // 2) - kh) // sh + 1
            w = (w + 2 * (kw // 2) - kw) // sw + 1
            if h < 1 or w < 1:
                raise ConfigError("conv stack shrinks the input below one position")
            c = layer.channels
        return c, h, w


def init_encoder(cfg: EncoderConfig, seed: int = 0, store: Optional[ParamStore] = None) -> ParamStore:
    """He-initialized parameters for the encoder, projection and CE head."""
    rng = np.random.default_rng(seed)
    store = store if store is not None else ParamStore()
    c_in = 1
    for i, layer in enumerate(cfg.convs):
        kh, kw = layer.kernel
        fan_in = c_in * kh * kw
        store.add(f"conv{i}.w", rng.normal(0, np.sqrt(2.0 / fan_in), (layer.channels, c_in, kh, kw)))
        store.add(f"conv{i}.b", np.zeros(layer.channels))
        c_in = layer.channels
    d, S, dz = c_in, cfg.memory_slots, cfg.embed_dim
    store.add("attn.W_q", rng.normal(0, np.sqrt(1.0 / d), (d, dz)))
    store.add("attn.M_k", rng.normal(0, np.sqrt(1.0 / dz), (S, dz)))
    store.add("attn.M_v", rng.normal(0, np.sqrt(1.0 / S), (S, dz)))
    store.add("proj.w1", rng.normal(0, np.sqrt(2.0 / dz), (dz, cfg.proj_hidden)))
    store.add("proj.b1", np.zeros(cfg.proj_hidden))
    store.add("proj.w2", rng.normal(0, np.sqrt(1.0 / cfg.proj_hidden), (cfg.proj_hidden, cfg.proj_dim)))
    store.add("proj.b2", np.zeros(cfg.proj_dim))
    store.add("head.w", rng.normal(0, np.sqrt(1.0 / dz), (dz, cfg.n_classes)))
    store.add("head.b", np.zeros(cfg.n_classes))
    return store


def external_attention(F, W_q, M_k, M_v, norm: str = "double_norm") -> Tensor:
    """Attention of every position against shared learnable key/value memories.

    ``F`` is ``(..., N, d)``; ``W_q`` ``(d, d')``; ``M_k`` and ``M_v`` ``(S, d')``.
    Cost is linear in ``N``. ``double_norm`` normalizes the ``(N, S)`` map with a
    softmax across positions for each memory slot, then an L1 normalization
    across slots for each position; ``softmax_only`` applies one softmax across
    slots.
    """
    F, W_q, M_k, M_v = (as_tensor(t) for t in (F, W_q, M_k, M_v))
    if F.shape[-1] != W_q.shape[0]:
        raise ShapeError(f"feature dim {F.shape[-1]} does not match W_q {W_q.shape}")
    if M_k.shape != M_v.shape or M_k.shape[1] != W_q.shape[1]:
        raise ShapeError("memory shapes must be (S, d') and match W_q's output dim")
    Q = F @ W_q
    A = Q @ M_k.T
    if norm == "double_norm":
        A = l1_normalize(softmax(A, axis=-2), axis=-1)
    elif norm == "softmax_only":
        A = softmax(A, axis=-1)
    else:
        raise ConfigError(f"unknown attention norm {norm!r}")
    return A @ M_v


def attention_map(F, W_q, M_k, norm: str = "double_norm") -> np.ndarray:
    """The normalized ``(N, S)`` map, for inspection and tests."""
    Q = np.asarray(F) @ np.asarray(W_q)
    A = Q @ np.asarray(M_k).T
    if norm == "double_norm":
        A = softmax(Tensor(A), axis=-2).data
        return A / (A.sum(axis=-1, keepdims=True) + 1e-12)
    return softmax(Tensor(A), axis=-1).data


def self_attention_reference(F, W_q, W_k, W_v) -> np.ndarray:
    """Quadratic self-attention, ``softmax(Q K^T) V`` with a row softmax."""
    F = np.asarray(F, dtype=float)
    Q, K, V = F @ W_q, F @ W_k, F @ W_v
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError("query and key dims differ")
    A = Q @ np.swapaxes(K, -1, -2)
    A = np.exp(A - A.max(axis=-1, keepdims=True))
    A /= A.sum(axis=-1, keepdims=True)
    return A @ V


def _as_batch(x, cfg: EncoderConfig) -> np.ndarray:
    x = np.asarray(getattr(x, "magnitudes", x), dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or tuple(x.shape[1:]) != cfg.input_shape:
        raise ShapeError(f"expected input (batch, {cfg.input_shape[0]}, {cfg.input_shape[1]}), got {x.shape}")
    return x[:, None]


def embed(x, store: ParamStore, cfg: EncoderConfig) -> Tensor:
    """Encoder ``g(x)``: conv stack, external attention, average pooling.

    The attention block is residual around the query projection: pooling a
    doubly-normalized map alone averages the value memory into a nearly
    input-independent vector.
    """
    h = Tensor(_as_batch(x, cfg))
    for i, layer in enumerate(cfg.convs):
        kh, kw = layer.kernel
        h = relu(conv2d(h, store[f"conv{i}.w"], store[f"conv{i}.b"], layer.stride, (kh // 2, kw // 2)))
    tokens = _tokens(h)
    W_q = store["attn.W_q"]
    out = tokens @ W_q + external_attention(tokens, W_q, store["attn.M_k"], store["attn.M_v"],
                                            cfg.attention_norm)
    return out.mean(axis=1)


def _tokens(h: Tensor) -> Tensor:
    """(B, C, H, W) feature map to (B, H*W, C) position tokens."""
    B, C, H, W = h.shape
    return transpose(reshape(h, (B, C, H * W)), (0, 2, 1))


def project(g: Tensor, store: ParamStore) -> Tensor:
    """Projection head, L2-normalized to the unit sphere."""
    h = relu(g @ store["proj.w1"] + store["proj.b1"])
    return l2_normalize(h @ store["proj.w2"] + store["proj.b2"], axis=-1)


def head_logits(g: Tensor, store: ParamStore) -> Tensor:
    return g @ store["head.w"] + store["head.b"]


def encoder_forward(x, store: ParamStore, cfg: EncoderConfig):
    """Return ``(g(x), z)``: the embedding and its unit-norm projection."""
    g = embed(x, store, cfg)
    return g, project(g, store)
