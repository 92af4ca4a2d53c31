"""Transformer building blocks: attention, feed-forward, normalization, masks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateMaskError, DimensionError
from .tensor import Tensor

MASK_LOGIT = -1e9


@dataclass
class AttentionParams:
    """Projections stored with heads side by side: column block i of ``w_q`` is head i's W_i^Q."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    h: int

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if self.h < 1 or d_model % self.h:
            raise ConfigError(f"head count {self.h} does not divide d_model {d_model}")
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d_model, d_model):
                raise ConfigError(f"attention projection shape {w.shape}, expected {(d_model, d_model)}")


@dataclass
class FfnParams:
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor


class Dropout:
    """Hands out a fresh Philox key per dropout site within one forward pass."""

    def __init__(self, p: float, seed: int = 0, step: int = 0, training: bool = False):
        self.p = p
        self.seed = seed
        self.step = step
        self.training = training and p > 0
        self._site = 0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        self._site += 1
        return T.dropout(x, self.p, T.dropout_key(self.seed, self._site, self.step), training=True)


NO_DROPOUT = Dropout(0.0)


def causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("causal_mask: n must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """[B, 1, 1, max_len] key mask, True where the key position is real."""
    lengths = np.asarray(lengths)
    return (np.arange(max_len)[None, :] < lengths[:, None])[:, None, None, :]


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe.astype(dtype)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                                 dropout: Dropout = NO_DROPOUT) -> tuple[Tensor, Tensor]:
    """softmax(QK^T / sqrt(d_k)) V over the last two axes.

    ``mask`` is boolean, True = attendable, and broadcasts against the
    ``[..., m, n]`` logits. Returns (output, weights); weights are taken
    before attention dropout.
    """
    d_k = q.shape[-1]
    if k.shape[-1] != d_k:
        raise DimensionError(f"attention: query dim {q.shape} vs key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    logits = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d_k))
    if mask is not None:
        if not np.broadcast_to(mask, logits.shape).any(axis=-1).all():
            raise DegenerateMaskError("attention: a query row has every key masked")
        logits = T.masked_fill(logits, mask, MASK_LOGIT)
    weights = T.softmax(logits, axis=-1)
    return T.matmul(dropout(weights), v), weights


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, m, d = x.shape
    x = T.reshape(x, (*lead, m, h, d // h))
    n = len(lead)
    return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, m, dh = x.shape
    n = len(lead)
    x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, (*lead, m, h * dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None, params: AttentionParams,
                         dropout: Dropout = NO_DROPOUT) -> tuple[Tensor, Tensor]:
    """Concat(head_1..head_h) W_o. Inputs are ``[..., len, d_model]``.

    Returns (output ``[..., m, d_model]``, weights ``[..., h, m, n]``).
    The mask broadcasts against ``[..., h, m, n]``.
    """
    h = params.h
    qh = _split_heads(T.matmul(q, params.w_q), h)
    kh = _split_heads(T.matmul(k, params.w_k), h)
    vh = _split_heads(T.matmul(v, params.w_v), h)
    heads, weights = scaled_dot_product_attention(qh, kh, vh, mask, dropout)
    return T.matmul(_merge_heads(heads), params.w_o), weights


def feed_forward(x: Tensor, params: FfnParams) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, params.w_1), params.b_1))
    return T.add(T.matmul(hidden, params.w_2), params.b_2)


layer_norm = T.layer_norm
