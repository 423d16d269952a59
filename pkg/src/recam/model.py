"""Encoder plus classifier head, with instance-to-batch preparation."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import RecamInstance
from .encoder import (ChoiceSequences, EncodedChoices, Encoder, EncoderConfig, Vocabulary,
                      build_choice_sequences)
from .heads import DEFAULT_INIT_STD, Head, HeadActivation, HeadKind, make_head
from .tensor import RandomSource, Tensor


class MultipleChoiceModel:
    def __init__(self, vocab: Vocabulary, encoder_cfg: EncoderConfig, head_kind, seed: int = 0,
                 dropout_rate: float = 0.5, dropout_samples: int = 5,
                 head_num_heads: Optional[int] = None, head_init_std: float = DEFAULT_INIT_STD):
        self.vocab = vocab
        self.seed = seed
        init = RandomSource(seed)
        self.encoder = Encoder(encoder_cfg, init.spawn(1))
        self.head: Head = make_head(head_kind, encoder_cfg.d_hidden,
                                    head_num_heads or encoder_cfg.num_heads, init.spawn(2),
                                    dropout_rate=dropout_rate, dropout_samples=dropout_samples,
                                    init_std=head_init_std)
        self._cache: Dict[int, tuple] = {}
        self._encoded: Dict[int, tuple] = {}

    @property
    def head_kind(self) -> HeadKind:
        return self.head.kind

    @property
    def max_seq_len(self) -> int:
        return self.encoder.cfg.max_seq_len

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {f"encoder.{n}": p for n, p in self.encoder.named_parameters().items()}
        out.update({f"head.{n}": p for n, p in self.head.named_parameters().items()})
        return out

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def sequences(self, inst: RecamInstance) -> ChoiceSequences:
        key = id(inst)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not inst:
            hit = (inst, build_choice_sequences(inst, self.vocab, self.max_seq_len))
            self._cache[key] = hit
        return hit[1]

    def batch(self, instances: Sequence[RecamInstance]) -> ChoiceSequences:
        return ChoiceSequences.stack([self.sequences(inst) for inst in instances])

    @property
    def encoder_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.encoder.named_parameters().values())

    def invalidate_cache(self) -> None:
        """Forget cached encoder outputs; call after changing encoder weights."""
        self._encoded.clear()

    def set_frozen(self, frozen: bool) -> None:
        self.encoder.set_frozen(frozen)
        self.invalidate_cache()

    def encode_instances(self, instances: Sequence[RecamInstance]) -> EncodedChoices:
        """Encoder output for a batch; a frozen encoder's outputs are computed once per instance."""
        seqs = self.batch(instances)
        if not self.encoder_frozen:
            return self.encoder.encode(seqs)
        rows = []
        for inst in instances:
            hit = self._encoded.get(id(inst))
            if hit is None or hit[0] is not inst:
                with T.no_grad():
                    emb = self.encoder.encode(self.sequences(inst)).embeddings.data
                hit = (inst, emb)
                self._encoded[id(inst)] = hit
            rows.append(hit[1])
        return EncodedChoices(Tensor(np.stack(rows)), seqs.segments, seqs.attention_mask)

    def forward(self, seqs: ChoiceSequences, training: bool = False,
                rng: Optional[RandomSource] = None) -> HeadActivation:
        return self.head.forward(self.encoder.encode(seqs), training, rng)

    def forward_instances(self, instances: Sequence[RecamInstance], training: bool = False,
                          rng: Optional[RandomSource] = None) -> HeadActivation:
        return self.head.forward(self.encode_instances(instances), training, rng)

    def logits(self, instances: Sequence[RecamInstance], batch_size: int = 2) -> np.ndarray:
        """Evaluation-mode logits ``[n, 5]``."""
        out = []
        with T.no_grad():
            for start in range(0, len(instances), batch_size):
                out.append(self.forward_instances(instances[start:start + batch_size]).logits.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 5))

    def load_parameters(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        self.invalidate_cache()

    def config(self) -> dict:
        return {"encoder": self.encoder.cfg.to_json(), "head": self.head.config(), "seed": self.seed}

    @classmethod
    def from_config(cls, vocab: Vocabulary, config: dict) -> "MultipleChoiceModel":
        head = config["head"]
        return cls(vocab, EncoderConfig(**config["encoder"]), head["kind"], seed=config["seed"],
                   dropout_rate=head["dropout_rate"], dropout_samples=head["dropout_samples"],
                   head_num_heads=head["num_heads"], head_init_std=head["init_std"])
