"""Classifier heads mapping encoded choice rows to a 5-way distribution.

All heads score each choice row independently with shared parameters and
apply the softmax across the five rows, so permuting the options permutes
the logits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, multi_head_attention
from .encoder import EncodedChoices
from .errors import ConfigurationError, DataError, DegenerateInputError, DimensionError
from .tensor import RandomSource, Tensor

DEFAULT_DROPOUT_RATE = 0.5
DEFAULT_DROPOUT_SAMPLES = 5
DEFAULT_INIT_STD = 0.02


class HeadKind(str, enum.Enum):
    SOFTMAX = "softmax"
    UNI_ATTN = "uni-attn"
    BI_ATTN = "bi-attn"

    @classmethod
    def parse(cls, value) -> "HeadKind":
        if isinstance(value, HeadKind):
            return value
        key = str(value).lower().replace("_", "-")
        aliases = {"softmax": cls.SOFTMAX, "baseline": cls.SOFTMAX, "softmax-baseline": cls.SOFTMAX,
                   "uni": cls.UNI_ATTN, "uni-attn": cls.UNI_ATTN, "uniattn": cls.UNI_ATTN,
                   "bi": cls.BI_ATTN, "bi-attn": cls.BI_ATTN, "biattn": cls.BI_ATTN}
        if key not in aliases:
            raise ConfigurationError(f"unknown head kind {value!r}")
        return aliases[key]


@dataclass
class SplitEmbeddings:
    """One choice row split into question+option and passage parts."""

    e_qo: Tensor
    e_p: Tensor
    qo_positions: np.ndarray
    p_positions: np.ndarray


@dataclass
class HeadActivation:
    logits: Tensor           # [..., 5]
    distribution: Tensor     # [..., 5]
    pooled: Tensor           # [..., 5, width]
    mha1: Optional[object] = None
    mha2: Optional[object] = None


def split_segments(enc: EncodedChoices) -> List[SplitEmbeddings]:
    """Split every row of a single instance (``embeddings`` is ``[5, L, d]``)."""
    if enc.embeddings.ndim != 3:
        raise DimensionError("split_segments expects one instance, embeddings [5, L, d]")
    out = []
    for row in range(enc.embeddings.shape[0]):
        qo_pos = np.flatnonzero(enc.qo_mask[row])
        p_pos = np.flatnonzero(enc.p_mask[row])
        if len(qo_pos) == 0:
            raise DataError(f"choice row {row} has an empty question/option segment")
        out.append(SplitEmbeddings(enc.embeddings[row, qo_pos], enc.embeddings[row, p_pos],
                                   qo_pos, p_pos))
    return out


def multi_sample_dropout_score(o: Tensor, w_t: Tensor, rate: float, samples: int,
                               training: bool, rng: Optional[RandomSource]) -> Tensor:
    """``o @ w_t`` averaged over ``samples`` independent dropout masks when training.

    ``o`` is ``[..., width]``, ``w_t`` is ``[width]``; returns ``[...]``.
    """
    if o.shape[-1] != w_t.shape[0]:
        raise DimensionError(f"pooled width {o.shape[-1]} != scoring width {w_t.shape[0]}")
    # An elementwise product reduced per row (rather than one matrix product
    # over all rows) keeps each choice's score independent of its row index,
    # which makes option permutation equivariance exact.
    if not training or rate == 0.0:
        return (o * w_t).sum(axis=-1)
    total = None
    for _ in range(samples):
        s = (T.dropout(o, rate, True, rng) * w_t).sum(axis=-1)
        total = s if total is None else total + s
    return total * (1.0 / samples)


def bi_attention(e_p: Tensor, e_qo: Tensor, attn_p: MultiHeadParams, attn_qo: MultiHeadParams):
    """Dual cross-attention for one choice row.

    Passage positions query the question+option positions, and vice versa.
    Returns ``(mha1 [L_p, d], mha2 [L_qo, d], fusion [2d])``.
    """
    if e_p.shape[-2] == 0 or e_qo.shape[-2] == 0:
        raise DegenerateInputError("bi-directional attention needs non-empty passage and question")
    mha1 = multi_head_attention(attn_p, e_p, e_qo, e_qo)
    mha2 = multi_head_attention(attn_qo, e_qo, e_p, e_p)
    fusion = T.concat([mha1.mean(axis=-2), mha2.mean(axis=-2)], axis=-1)
    return mha1, mha2, fusion


class Head:
    kind: HeadKind

    def __init__(self, d_model: int, num_heads: int, rng: RandomSource,
                 dropout_rate: float = DEFAULT_DROPOUT_RATE,
                 dropout_samples: int = DEFAULT_DROPOUT_SAMPLES, init_std: float = DEFAULT_INIT_STD):
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.dropout_rate = dropout_rate
        self.dropout_samples = dropout_samples
        self.init_std = init_std
        self.w_t = T.parameter(rng.generator.normal(0.0, init_std, self.pooled_width), "w_t")

    @property
    def pooled_width(self) -> int:
        return self.d_model

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"w_t": self.w_t}

    def attention_parameter_count(self) -> int:
        return sum(p.size for n, p in self.named_parameters().items() if n != "w_t")

    def forward(self, enc: EncodedChoices, training: bool = False,
                rng: Optional[RandomSource] = None) -> HeadActivation:
        pooled, extras = self._pool(enc)
        logits = multi_sample_dropout_score(pooled, self.w_t, self.dropout_rate,
                                            self.dropout_samples, training, rng)
        return HeadActivation(logits, T.softmax(logits, axis=-1), pooled, **extras)

    def _pool(self, enc: EncodedChoices):
        """Return ``(pooled [..., 5, width], extra activations)``."""
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind.value, "d_model": self.d_model, "num_heads": self.num_heads,
                "dropout_rate": self.dropout_rate, "dropout_samples": self.dropout_samples,
                "init_std": self.init_std}


class SoftmaxHead(Head):
    """Linear scoring of the [CLS] position."""

    kind = HeadKind.SOFTMAX

    def _pool(self, enc):
        if not np.all(enc.attention_mask.any(axis=-1)):
            raise DegenerateInputError("a choice row is all padding")
        return enc.embeddings[..., 0, :], {}


class UniAttnHead(Head):
    """Self-attention over the whole row, mean-pooled over non-padding positions."""

    kind = HeadKind.UNI_ATTN

    def __init__(self, d_model, num_heads, rng, **kw):
        super().__init__(d_model, num_heads, rng, **kw)
        self.attn = MultiHeadParams.init(d_model, num_heads, rng, prefix="attn", std=self.init_std)

    def named_parameters(self):
        return {**self.attn.named_parameters("attn."), "w_t": self.w_t}

    def _pool(self, enc):
        e, mask = enc.embeddings, enc.attention_mask
        out = multi_head_attention(self.attn, e, e, e, mask)
        return T.mean_pool(out, mask), {"mha1": out}


class BiAttnHead(Head):
    """Dual co-attention between passage and question+option segments.

    The batched path keeps full-length rows and restricts keys by segment
    mask, then pools each direction over its own query segment; this equals
    running :func:`bi_attention` on explicitly split rows.
    """

    kind = HeadKind.BI_ATTN

    def __init__(self, d_model, num_heads, rng, **kw):
        super().__init__(d_model, num_heads, rng, **kw)
        self.attn_p = MultiHeadParams.init(d_model, num_heads, rng, prefix="attn_p", std=self.init_std)
        self.attn_qo = MultiHeadParams.init(d_model, num_heads, rng, prefix="attn_qo", std=self.init_std)

    @property
    def pooled_width(self):
        return 2 * self.d_model

    def named_parameters(self):
        return {**self.attn_p.named_parameters("attn_p."),
                **self.attn_qo.named_parameters("attn_qo."), "w_t": self.w_t}

    def _pool(self, enc):
        e, qo, p = enc.embeddings, enc.qo_mask, enc.p_mask
        if not np.all(p.any(axis=-1)):
            raise DegenerateInputError("a choice row has an empty passage segment")
        if not np.all(qo.any(axis=-1)):
            raise DegenerateInputError("a choice row has an empty question/option segment")
        mha1 = multi_head_attention(self.attn_p, e, e, e, qo)
        mha2 = multi_head_attention(self.attn_qo, e, e, e, p)
        fusion = T.concat([T.mean_pool(mha1, p), T.mean_pool(mha2, qo)], axis=-1)
        return fusion, {"mha1": mha1, "mha2": mha2}

    def forward_splits(self, splits: List[SplitEmbeddings], training: bool = False,
                       rng: Optional[RandomSource] = None) -> HeadActivation:
        """Reference path over explicitly split rows (one instance)."""
        mha1, mha2, fused = [], [], []
        for s in splits:
            m1, m2, f = bi_attention(s.e_p, s.e_qo, self.attn_p, self.attn_qo)
            mha1.append(m1)
            mha2.append(m2)
            fused.append(f)
        pooled = T.stack(fused, axis=0)
        logits = multi_sample_dropout_score(pooled, self.w_t, self.dropout_rate,
                                            self.dropout_samples, training, rng)
        return HeadActivation(logits, T.softmax(logits, axis=-1), pooled, mha1, mha2)


HEAD_CLASSES = {HeadKind.SOFTMAX: SoftmaxHead, HeadKind.UNI_ATTN: UniAttnHead,
                HeadKind.BI_ATTN: BiAttnHead}


def make_head(kind, d_model: int, num_heads: int, rng: RandomSource, **kw) -> Head:
    head = HEAD_CLASSES[HeadKind.parse(kind)](d_model, num_heads, rng, **kw)
    for name, p in head.named_parameters().items():
        p.name = f"head.{name}"
    return head


def bi_attention_head(splits: List[SplitEmbeddings], head: BiAttnHead, training: bool = False,
                      rng: Optional[RandomSource] = None) -> HeadActivation:
    return head.forward_splits(splits, training, rng)


def uni_attention_head(enc: EncodedChoices, head: UniAttnHead, training: bool = False,
                       rng: Optional[RandomSource] = None) -> HeadActivation:
    return head.forward(enc, training, rng)


def softmax_head(enc: EncodedChoices, head: SoftmaxHead, training: bool = False,
                 rng: Optional[RandomSource] = None) -> HeadActivation:
    return head.forward(enc, training, rng)
