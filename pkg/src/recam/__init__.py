"""Cloze-style multiple-choice reading comprehension: a small numpy transformer with
three classifier heads, a training loop, and a language-model prompting harness."""

from .data import DatasetSplit, RecamInstance, load_recam_jsonl, make_synthetic_dataset
from .encoder import EncoderConfig, Vocabulary, build_vocab
from .heads import HeadKind
from .model import MultipleChoiceModel
from .trainer import TrainConfig, evaluate_accuracy, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "RecamInstance", "load_recam_jsonl", "make_synthetic_dataset",
    "EncoderConfig", "Vocabulary", "build_vocab", "HeadKind", "MultipleChoiceModel",
    "TrainConfig", "evaluate_accuracy", "load_checkpoint", "save_checkpoint", "train",
]
