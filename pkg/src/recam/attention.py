"""Scaled dot-product and multi-head attention with key padding masks.

All functions accept arbitrary leading batch axes: queries are
``[..., L_q, d]``, keys/values ``[..., L_k, d]`` and the key mask
``[..., L_k]`` (True = attend).  Masked keys get a logit of ``-inf`` and
therefore exactly zero weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError, DimensionError
from .tensor import RandomSource, Tensor


def _key_mask(mask, keys: Tensor) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != keys.shape[-2]:
        raise DimensionError(f"key mask length {mask.shape[-1]} != key length {keys.shape[-2]}")
    if not np.all(mask.any(axis=-1)):
        raise DegenerateInputError("every key position is masked")
    return mask


def attention_weights(q: Tensor, k: Tensor, mask=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) with masked keys removed; shape ``[..., L_q, L_k]``."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    mask = _key_mask(mask, k)
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        mask = mask[..., None, :]
    return T.softmax(scores, axis=-1, mask=mask)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys have length {k.shape[-2]} but values have {v.shape[-2]}")
    return T.matmul(attention_weights(q, k, mask), v)


@dataclass
class MultiHeadParams:
    """Projection matrices for one multi-head attention block.

    Each ``w_*`` is ``d_model x d_model`` and holds the per-head projections
    side by side: head ``i`` owns columns ``i*d_k:(i+1)*d_k``.  ``w_o``
    maps the concatenated heads back to ``d_model``.  No biases.
    """

    num_heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    @classmethod
    def init(cls, d_model: int, num_heads: int, rng: RandomSource, prefix: str = "mha",
             std: Optional[float] = None) -> "MultiHeadParams":
        if num_heads < 1 or d_model % num_heads:
            raise ConfigurationError(
                f"d_model={d_model} is not divisible by num_heads={num_heads}")
        std = 1.0 / np.sqrt(d_model) if std is None else std
        gen = rng.generator
        mats = {name: T.parameter(gen.normal(0.0, std, (d_model, d_model)), f"{prefix}.{name}")
                for name in ("w_q", "w_k", "w_v", "w_o")}
        return cls(num_heads=num_heads, **mats)

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}{n}": getattr(self, n) for n in ("w_q", "w_k", "w_v", "w_o")}

    def head_slice(self, i: int) -> slice:
        return slice(i * self.d_head, (i + 1) * self.d_head)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, length, width = x.shape
    return x.reshape(*lead, length, h, width // h).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, h * dh)


def multi_head_attention(p: MultiHeadParams, q: Tensor, k: Tensor, v: Tensor, mask=None,
                         return_weights: bool = False):
    """concat(head_1..head_h) W_O with head_i = Attention(q W_i^Q, k W_i^K, v W_i^V)."""
    for name, x in (("query", q), ("key", k), ("value", v)):
        if x.shape[-1] != p.d_model:
            raise DimensionError(f"{name} width {x.shape[-1]} != d_model {p.d_model}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys have length {k.shape[-2]} but values have {v.shape[-2]}")
    mask = _key_mask(mask, k)
    h = p.num_heads
    qh = _split_heads(T.matmul(q, p.w_q), h)
    kh = _split_heads(T.matmul(k, p.w_k), h)
    vh = _split_heads(T.matmul(v, p.w_v), h)
    head_mask = None if mask is None else mask[..., None, :]
    weights = attention_weights(qh, kh, head_mask)
    out = T.matmul(_merge_heads(T.matmul(weights, vh)), p.w_o)
    return (out, weights) if return_weights else out
