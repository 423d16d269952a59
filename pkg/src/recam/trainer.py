"""Fine-tuning loop with gradient accumulation, periodic validation and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import DatasetSplit
from .encoder import Vocabulary
from .errors import ConfigurationError, DataError, FormatError
from .model import MultipleChoiceModel
from .optim import AdamW, AdamWState
from .tensor import RandomSource


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    train_batch_size: int = 2
    eval_batch_size: int = 2
    epochs: float = 1.0
    val_check_interval: float = 0.2
    dropout_rate: float = 0.5
    grad_accumulation_steps: int = 32
    seed: int = 0
    head_kind: str = "bi-attn"
    freeze_encoder: bool = True
    shuffle: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        for name in ("learning_rate", "train_batch_size", "eval_batch_size",
                     "grad_accumulation_steps"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ConfigurationError("epochs and weight_decay must be non-negative")
        if not 0.0 < self.val_check_interval <= 1.0:
            raise ConfigurationError("val_check_interval must lie in (0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    predictions: np.ndarray
    logits: np.ndarray


def predictions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest option index."""
    return np.argmax(logits, axis=-1)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        raise DataError("accuracy of an empty split is undefined")
    return float(np.mean(predictions == labels))


def evaluate_accuracy(model: MultipleChoiceModel, data: DatasetSplit,
                      batch_size: int = 2) -> EvalResult:
    if len(data) == 0:
        raise DataError(f"split {data.name!r} is empty")
    labels = data.labels
    logits = model.logits(data.instances, batch_size)
    loss = float(T.cross_entropy(T.Tensor(logits), labels).data)
    preds = predictions_from_logits(logits)
    return EvalResult(accuracy(preds, labels), loss, preds, logits)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"RECAMCKP"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model_config: dict
    vocab: List[str]
    params: Dict[str, np.ndarray]
    train_config: Optional[dict] = None
    optimizer: Optional[dict] = None           # hyperparameters + step_count
    moments: Dict[str, np.ndarray] = field(default_factory=dict)  # "m:<name>", "v:<name>"
    rng_state: Optional[dict] = None
    step: int = 0
    micro_step: int = 0
    metrics: List[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build_model(self) -> MultipleChoiceModel:
        model = MultipleChoiceModel.from_config(Vocabulary(self.vocab), self.model_config)
        model.load_parameters(self.params)
        if self.train_config is not None:
            model.set_frozen(self.train_config.get("freeze_encoder", True))
        return model

    @classmethod
    def capture(cls, model: MultipleChoiceModel, cfg: Optional[TrainConfig] = None,
                optimizer: Optional[AdamW] = None, rng: Optional[RandomSource] = None,
                step: int = 0, micro_step: int = 0, metrics=None, extra=None) -> "Checkpoint":
        params = {n: p.data.copy() for n, p in model.named_parameters().items()}
        opt_meta, moments = None, {}
        if optimizer is not None:
            st = optimizer.state
            opt_meta = {**st.hyperparameters(), "step_count": st.step_count,
                        "params": [p.name for p in optimizer.params]}
            if st.first_moment:
                for p, m, v in zip(optimizer.params, st.first_moment, st.second_moment):
                    moments[f"m:{p.name}"] = m.copy()
                    moments[f"v:{p.name}"] = v.copy()
        return cls(model.config(), list(model.vocab.tokens), params,
                   None if cfg is None else cfg.to_json(), opt_meta, moments,
                   None if rng is None else copy.deepcopy(rng.get_state()),
                   step, micro_step, copy.deepcopy(list(metrics or [])), dict(extra or {}))


def _encode_blocks(arrays: Dict[str, np.ndarray]):
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return manifest, chunks


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    param_manifest, param_chunks = _encode_blocks(ck.params)
    moment_manifest, moment_chunks = _encode_blocks(ck.moments)
    payload = b"".join(param_chunks + moment_chunks)
    n_param_values = sum(len(c) for c in param_chunks) // 8
    for entry in moment_manifest:
        entry["offset"] += n_param_values
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ck.model_config,
        "vocab": ck.vocab,
        "train_config": ck.train_config,
        "optimizer": ck.optimizer,
        "rng_state": ck.rng_state,
        "step": ck.step,
        "micro_step": ck.micro_step,
        "metrics": ck.metrics,
        "extra": ck.extra,
        "params": param_manifest,
        "moments": moment_manifest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)) + head + payload


def save_checkpoint(ck: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise FormatError("checkpoint is truncated")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + head_len:
        raise FormatError("checkpoint header is truncated")
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    payload = blob[start + head_len:]
    if len(payload) != header.get("payload_bytes"):
        raise FormatError("checkpoint payload is truncated or has trailing bytes")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise FormatError("checkpoint payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")

    def blocks(manifest):
        out = {}
        for entry in manifest:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            out[entry["name"]] = values[entry["offset"]:entry["offset"] + n].reshape(
                entry["shape"]).astype(np.float64)
        return out

    return Checkpoint(header["model_config"], header["vocab"], blocks(header["params"]),
                      header["train_config"], header["optimizer"], blocks(header["moments"]),
                      header["rng_state"], header["step"], header["micro_step"],
                      header["metrics"], header["extra"])


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return parse_checkpoint(blob)


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Optional[Checkpoint]
    metrics: List[dict]
    model: MultipleChoiceModel

    @property
    def steps(self) -> int:
        return self.checkpoint.step


def epoch_order(seed: int, epoch: int, n: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return RandomSource(seed).spawn(7919, epoch).generator.permutation(n)


def _write_metric(log_file, record: dict) -> None:
    if log_file is not None:
        log_file.write(json.dumps(record, sort_keys=True) + "\n")
        log_file.flush()


def train(model: MultipleChoiceModel, data: DatasetSplit, dev: Optional[DatasetSplit],
          cfg: TrainConfig, resume: Optional[Checkpoint] = None,
          metrics_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """Fine-tune ``model`` in place and return last/dev-best checkpoints plus the metrics log.

    Each micro-batch loss is the batch-mean cross-entropy divided by
    ``grad_accumulation_steps``; an optimizer step follows every
    ``grad_accumulation_steps`` micro-batches.  A trailing partial window
    still steps, with its gradient rescaled to a mean over the micro-batches
    it actually saw.  Validation runs every ``val_check_interval`` of an epoch.
    """
    if len(data) == 0:
        raise DataError("training split is empty")
    if not data.labeled:
        raise DataError(f"training split {data.name!r} has unlabeled instances")
    model.set_frozen(cfg.freeze_encoder)
    model.head.dropout_rate = cfg.dropout_rate
    params = model.trainable_parameters()
    optimizer = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = RandomSource(cfg.seed).spawn(104729)
    metrics: List[dict] = []
    step = micro = 0
    if resume is not None:
        if resume.extra.get("pending_micro_batches", 0):
            raise ConfigurationError("cannot resume from a checkpoint taken inside an "
                                     "accumulation window")
        step, micro = resume.step, resume.micro_step
        metrics = copy.deepcopy(resume.metrics)
        if resume.rng_state is not None:
            rng.set_state(copy.deepcopy(resume.rng_state))
        if resume.optimizer is not None:
            st = optimizer.state
            st.step_count = resume.optimizer["step_count"]
            if resume.moments:
                st.first_moment = [resume.moments[f"m:{p.name}"].copy() for p in params]
                st.second_moment = [resume.moments[f"v:{p.name}"].copy() for p in params]

    n, bs, accum = len(data), cfg.train_batch_size, cfg.grad_accumulation_steps
    per_epoch = math.ceil(n / bs)
    total_micro = math.ceil(cfg.epochs * per_epoch - 1e-9)
    val_every = max(1, round(cfg.val_check_interval * per_epoch))
    labels_all = data.labels
    best: Optional[Checkpoint] = None
    best_acc = -1.0
    log_file = open(metrics_path, "a" if resume else "w", encoding="utf-8") if metrics_path else None

    def snapshot():
        return Checkpoint.capture(model, cfg, optimizer, rng, step, micro, metrics,
                                  extra={"pending_micro_batches": window})

    window, window_loss, window_hits, window_count = 0, 0.0, 0, 0
    orders: Dict[int, np.ndarray] = {}
    try:
        optimizer.zero_grad()
        while micro < total_micro:
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            epoch, j = divmod(micro, per_epoch)
            if epoch not in orders:
                orders = {epoch: epoch_order(cfg.seed, epoch, n, cfg.shuffle)}
            idx = orders[epoch][j * bs:(j + 1) * bs]
            batch = [data.instances[i] for i in idx]
            act = model.forward_instances(batch, training=True, rng=rng)
            labels = labels_all[idx]
            loss = T.cross_entropy(act.logits, labels) * (1.0 / accum)
            loss.backward()
            window += 1
            micro += 1
            window_loss += float(loss.data) * accum * len(idx)
            window_hits += int(np.sum(np.argmax(act.logits.data, axis=-1) == labels))
            window_count += len(idx)
            if window == accum or micro == total_micro:
                optimizer.step(scale=accum / window)
                optimizer.zero_grad()
                step += 1
                record = {"step": step, "split": "train", "loss": window_loss / window_count,
                          "accuracy": window_hits / window_count}
                metrics.append(record)
                _write_metric(log_file, record)
                window, window_loss, window_hits, window_count = 0, 0.0, 0, 0
            if dev is not None and len(dev) and ((j + 1) % val_every == 0 or j + 1 == per_epoch):
                ev = evaluate_accuracy(model, dev, cfg.eval_batch_size)
                record = {"step": step, "split": "dev", "loss": ev.loss, "accuracy": ev.accuracy}
                metrics.append(record)
                _write_metric(log_file, record)
                if ev.accuracy > best_acc:
                    best_acc = ev.accuracy
                    best = snapshot()
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(snapshot(), best, metrics, model)
