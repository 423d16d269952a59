"""Tokenizer, cloze input construction and a small pre-norm transformer encoder."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .attention import MultiHeadParams, multi_head_attention
from .data import NUM_OPTIONS, PLACEHOLDER, RecamInstance
from .errors import ConfigurationError, DataError, DegenerateInputError
from .tensor import RandomSource, Tensor

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK, PLACEHOLDER)

SEG_PAD, SEG_QO, SEG_P = 0, 1, 2

_TOKEN_RE = re.compile(r"@placeholder|\w+|[^\w\s]")


def split_tokens(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self.pad_id, self.cls_id, self.sep_id, self.mask_id, self.unk_id, self.placeholder_id = (
            self.index[t] for t in SPECIAL_TOKENS)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def special_ids(self) -> np.ndarray:
        return np.arange(len(SPECIAL_TOKENS))

    def to_json(self) -> dict:
        return {"tokens": self.tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Union[str, Iterable[str]], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically, capped at ``max_size`` entries."""
    if max_size < len(SPECIAL_TOKENS):
        raise ConfigurationError(f"max_size must be at least {len(SPECIAL_TOKENS)}")
    if isinstance(corpus, str):
        corpus = [corpus]
    counts = Counter()
    for line in corpus:
        counts.update(t for t in split_tokens(line) if t not in SPECIAL_TOKENS)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[:max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(list(SPECIAL_TOKENS) + keep)


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    return [vocab.id(tok) for tok in split_tokens(text)]


@dataclass
class EncoderConfig:
    vocab_size: int
    num_layers: int = 1
    num_heads: int = 2
    d_hidden: int = 32
    d_ff: int = 64
    max_seq_len: int = 256
    freeze_encoder: bool = True
    embedding_std: float = 1.0

    def __post_init__(self):
        for name in ("vocab_size", "num_layers", "num_heads", "d_hidden", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_hidden % self.num_heads:
            raise ConfigurationError(
                f"d_hidden={self.d_hidden} is not divisible by num_heads={self.num_heads}")
        if self.max_seq_len < 8:
            raise ConfigurationError("max_seq_len must be at least 8")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ChoiceSequences:
    """Token ids, segment labels and attention mask, each ``[..., 5, L]``."""

    token_ids: np.ndarray
    segments: np.ndarray
    attention_mask: np.ndarray

    @classmethod
    def stack(cls, items: Sequence["ChoiceSequences"]) -> "ChoiceSequences":
        return cls(np.stack([s.token_ids for s in items]),
                   np.stack([s.segments for s in items]),
                   np.stack([s.attention_mask for s in items]))

    def permute(self, perm: Sequence[int]) -> "ChoiceSequences":
        perm = list(perm)
        return ChoiceSequences(self.token_ids[..., perm, :], self.segments[..., perm, :],
                               self.attention_mask[..., perm, :])


@dataclass
class EncodedChoices:
    embeddings: Tensor  # [..., 5, L, d]
    segments: np.ndarray
    attention_mask: np.ndarray

    @property
    def qo_mask(self) -> np.ndarray:
        return self.segments == SEG_QO

    @property
    def p_mask(self) -> np.ndarray:
        return self.segments == SEG_P


def fill_question_ids(inst: RecamInstance, option_index: int, vocab: Vocabulary) -> List[int]:
    q = tokenize(inst.question, vocab)
    spots = [i for i, t in enumerate(q) if t == vocab.placeholder_id]
    if len(spots) != 1:
        raise DataError(f"instance {inst.id}: question must contain exactly one {PLACEHOLDER}")
    i = spots[0]
    return q[:i] + tokenize(inst.options[option_index], vocab) + q[i + 1:]


def build_choice_sequences(inst: RecamInstance, vocab: Vocabulary,
                           max_seq_len: Union[int, "EncoderConfig"]) -> ChoiceSequences:
    """Row i = [CLS] question-with-option-i [SEP] article [SEP], cut or padded to ``max_seq_len``.

    Only article tokens are ever truncated.  The closing [SEP] belongs to the
    passage segment when at least one article token survives, otherwise to
    the question segment.
    """
    length = getattr(max_seq_len, "max_seq_len", max_seq_len)
    article = tokenize(inst.article, vocab)
    ids = np.full((NUM_OPTIONS, length), vocab.pad_id, dtype=np.int64)
    segs = np.full((NUM_OPTIONS, length), SEG_PAD, dtype=np.int8)
    for row in range(NUM_OPTIONS):
        qo = fill_question_ids(inst, row, vocab)
        if len(qo) > length - 3:
            raise DataError(f"instance {inst.id}: question with option {row} has {len(qo)} tokens, "
                            f"more than the {length - 3} that fit in {length}")
        passage = article[:length - 3 - len(qo)]
        tokens = [vocab.cls_id] + qo + [vocab.sep_id] + passage + [vocab.sep_id]
        n_qo = len(qo) + 2
        ids[row, :len(tokens)] = tokens
        segs[row, :n_qo] = SEG_QO
        segs[row, n_qo:len(tokens)] = SEG_P if passage else SEG_QO
    return ChoiceSequences(ids, segs, segs != SEG_PAD)


class Encoder:
    """Token + learned positional embeddings followed by pre-norm transformer blocks."""

    def __init__(self, cfg: EncoderConfig, rng: RandomSource):
        self.cfg = cfg
        gen = rng.generator
        d, ff = cfg.d_hidden, cfg.d_ff
        P = T.parameter
        params: Dict[str, Tensor] = {
            "tok_emb": P(gen.normal(0.0, cfg.embedding_std, (cfg.vocab_size, d))),
            "pos_emb": P(gen.normal(0.0, 0.1 * cfg.embedding_std, (cfg.max_seq_len, d))),
        }
        self.layers = []
        for i in range(cfg.num_layers):
            layer = {
                "ln1_g": P(np.ones(d)), "ln1_b": P(np.zeros(d)),
                "attn": MultiHeadParams.init(d, cfg.num_heads, rng, prefix=f"layers.{i}.attn"),
                "ln2_g": P(np.ones(d)), "ln2_b": P(np.zeros(d)),
                "ff_w1": P(gen.normal(0.0, 1.0 / np.sqrt(d), (d, ff))), "ff_b1": P(np.zeros(ff)),
                "ff_w2": P(gen.normal(0.0, 1.0 / np.sqrt(ff), (ff, d))), "ff_b2": P(np.zeros(d)),
            }
            self.layers.append(layer)
        params["ln_f_g"] = P(np.ones(d))
        params["ln_f_b"] = P(np.zeros(d))
        self.embeddings = params
        for name, p in self.named_parameters().items():
            p.name = name
        self.set_frozen(cfg.freeze_encoder)

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {"tok_emb": self.embeddings["tok_emb"], "pos_emb": self.embeddings["pos_emb"]}
        for i, layer in enumerate(self.layers):
            for key, value in layer.items():
                if isinstance(value, MultiHeadParams):
                    out.update(value.named_parameters(f"layers.{i}.{key}."))
                else:
                    out[f"layers.{i}.{key}"] = value
        out["ln_f_g"] = self.embeddings["ln_f_g"]
        out["ln_f_b"] = self.embeddings["ln_f_b"]
        return out

    def set_frozen(self, frozen: bool) -> None:
        self.cfg.freeze_encoder = bool(frozen)
        for p in self.named_parameters().values():
            p.requires_grad = not frozen

    def forward_ids(self, token_ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
        """Hidden states ``[..., L, d]`` for id array ``[..., L]``."""
        token_ids = np.asarray(token_ids)
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size):
            raise DataError(f"token id outside [0, {self.cfg.vocab_size})")
        length = token_ids.shape[-1]
        if length > self.cfg.max_seq_len:
            raise DataError(f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}")
        mask = np.asarray(attention_mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateInputError("a sequence has no non-padding positions")
        emb = self.embeddings
        x = T.embedding(emb["tok_emb"], token_ids) + emb["pos_emb"][:length]
        for layer in self.layers:
            h = T.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            x = x + multi_head_attention(layer["attn"], h, h, h, mask)
            h = T.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            h = T.gelu(T.matmul(h, layer["ff_w1"]) + layer["ff_b1"])
            x = x + T.matmul(h, layer["ff_w2"]) + layer["ff_b2"]
        return T.layer_norm(x, emb["ln_f_g"], emb["ln_f_b"])

    def encode(self, seqs: ChoiceSequences) -> EncodedChoices:
        return EncodedChoices(self.forward_ids(seqs.token_ids, seqs.attention_mask),
                              seqs.segments, seqs.attention_mask)


# -- task-adaptive masked-LM pretraining --------------------------------------

MLM_RATE = 0.15


def pack_documents(docs: Sequence[Sequence[int]], vocab: Vocabulary, max_seq_len: int):
    """Wrap each id list as [CLS] ids [SEP] and right-pad to the longest; returns (ids, mask)."""
    rows = [[vocab.cls_id] + list(d)[:max_seq_len - 2] + [vocab.sep_id] for d in docs]
    if not rows:
        raise DegenerateInputError("empty pretraining batch")
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), vocab.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
    return ids, ids != vocab.pad_id


def select_mlm_positions(ids: np.ndarray, vocab: Vocabulary, rng: RandomSource,
                         rate: float = MLM_RATE) -> np.ndarray:
    """Bernoulli(rate) selection over non-special positions; at least one is always chosen."""
    maskable = ~np.isin(ids, [vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.mask_id,
                              vocab.placeholder_id])
    if not maskable.any():
        raise DegenerateInputError("no maskable positions in the pretraining batch")
    chosen = maskable & (rng.generator.random(ids.shape) < rate)
    if not chosen.any():
        candidates = np.flatnonzero(maskable)
        chosen.flat[candidates[rng.generator.integers(len(candidates))]] = True
    return chosen


class MLMHead:
    """Output layer tied to the token embedding, plus a free per-token bias."""

    def __init__(self, encoder: Encoder):
        self.encoder = encoder
        self.bias = T.parameter(np.zeros(encoder.cfg.vocab_size), "mlm.bias")

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"mlm.bias": self.bias}

    def loss(self, ids: np.ndarray, attention_mask: np.ndarray, vocab: Vocabulary,
             rng: RandomSource) -> Tensor:
        chosen = select_mlm_positions(ids, vocab, rng)
        corrupted = np.where(chosen, vocab.mask_id, ids)
        hidden = self.encoder.forward_ids(corrupted, attention_mask)
        picked = hidden[chosen]  # [n_masked, d]
        logits = T.matmul(picked, self.encoder.embeddings["tok_emb"].transpose()) + self.bias
        return T.cross_entropy(logits, ids[chosen])


def mlm_pretrain_step(docs: Sequence[Sequence[int]], head: MLMHead, vocab: Vocabulary,
                      rng: RandomSource, optimizer) -> float:
    """One masked-LM update over ``docs``; returns the mean loss over masked positions."""
    ids, mask = pack_documents(docs, vocab, head.encoder.cfg.max_seq_len)
    optimizer.zero_grad()
    loss = head.loss(ids, mask, vocab, rng)
    loss.backward()
    optimizer.step()
    return loss.item()
