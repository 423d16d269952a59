"""ReCAM-style JSONL datasets and planted-rule synthetic datasets."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DataError, ValidationError
from .tensor import RandomSource

PLACEHOLDER = "@placeholder"
NUM_OPTIONS = 5
SPLIT_NAMES = ("train", "trial", "dev", "test")

_PLACEHOLDER_RE = re.compile(re.escape(PLACEHOLDER), re.IGNORECASE)

# Official split sizes (train, trial, dev, test) per subtask.
OFFICIAL_SPLIT_SIZES = {
    1: {"train": 3227, "trial": 1000, "dev": 837, "test": 2025},
    2: {"train": 3318, "trial": 1000, "dev": 851, "test": 2017},
}


@dataclass(frozen=True)
class RecamInstance:
    article: str
    question: str
    options: tuple
    label: Optional[int]
    id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        validate_instance(self)

    def fill(self, option_index: int) -> str:
        """The question with option ``option_index`` substituted at the placeholder."""
        return _PLACEHOLDER_RE.sub(lambda _: self.options[option_index], self.question, count=1)

    @property
    def answer(self) -> Optional[str]:
        return None if self.label is None else self.options[self.label]

    def to_json(self) -> dict:
        record = {"article": self.article, "question": self.question}
        for i, opt in enumerate(self.options):
            record[f"option_{i}"] = opt
        if self.label is not None:
            record["label"] = self.label
        return record


def validate_instance(inst: RecamInstance, line: Optional[int] = None) -> None:
    if len(inst.options) != NUM_OPTIONS:
        raise ValidationError(f"expected {NUM_OPTIONS} options, got {len(inst.options)}",
                              line, "options")
    for i, opt in enumerate(inst.options):
        if not isinstance(opt, str) or not opt.strip():
            raise ValidationError("option must be a non-empty string", line, f"option_{i}")
    n_placeholders = len(_PLACEHOLDER_RE.findall(inst.question))
    if n_placeholders != 1:
        raise ValidationError(f"question must contain exactly one {PLACEHOLDER}, "
                              f"found {n_placeholders}", line, "question")
    if inst.label is not None and not (isinstance(inst.label, int) and 0 <= inst.label < NUM_OPTIONS):
        raise ValidationError(f"label {inst.label!r} does not index an option", line, "label")


@dataclass
class DatasetSplit:
    name: str
    instances: List[RecamInstance] = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    @property
    def labeled(self) -> bool:
        return all(inst.label is not None for inst in self.instances)

    @property
    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise DataError(f"split {self.name!r} has unlabeled instances")
        return np.array([inst.label for inst in self.instances], dtype=np.int64)

    def subset(self, indices: Iterable[int], name: Optional[str] = None) -> "DatasetSplit":
        return DatasetSplit(name or self.name, [self.instances[i] for i in indices])


def _field(record: dict, *names):
    for name in names:
        if name in record:
            return record[name]
    lowered = {k.lower(): v for k, v in record.items()}
    for name in names:
        if name.lower() in lowered:
            return lowered[name.lower()]
    raise KeyError(names[0])


def _coerce_label(value, line):
    if isinstance(value, bool):
        raise ValidationError(f"label {value!r} is not an integer", line, "label")
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().lstrip("-").isdigit():
        return int(value.strip())
    raise ValidationError(f"label {value!r} is not an integer", line, "label")


def parse_record(record: dict, line: Optional[int] = None, require_label: bool = True) -> RecamInstance:
    if not isinstance(record, dict):
        raise ValidationError("record is not a JSON object", line)
    values = {}
    for key, names in (("article", ("article",)), ("question", ("question",))):
        try:
            values[key] = _field(record, *names)
        except KeyError:
            raise ValidationError("missing field", line, key) from None
        if not isinstance(values[key], str):
            raise ValidationError("must be a string", line, key)
    options = []
    for i in range(NUM_OPTIONS):
        try:
            options.append(_field(record, f"option_{i}", f"Option{i}", f"option{i}"))
        except KeyError:
            raise ValidationError("missing field", line, f"option_{i}") from None
    try:
        label = _coerce_label(_field(record, "label"), line)
    except KeyError:
        if require_label:
            raise ValidationError("missing field", line, "label") from None
        label = None
    try:
        return RecamInstance(values["article"], values["question"], tuple(options), label, id=line)
    except ValidationError as exc:
        raise ValidationError(str(exc), line, exc.field) from None


def load_recam_jsonl(path: Union[str, Path], name: Optional[str] = None) -> DatasetSplit:
    """Read one instance per line, keeping file order; ``id`` is the 1-based line number.

    Labels are optional only for splits named ``test``.
    """
    path = Path(path)
    if name is None:
        stem = path.stem.lower()
        name = next((s for s in SPLIT_NAMES if s in stem), stem)
    instances = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            instances.append(parse_record(record, lineno, require_label=(name != "test")))
    return DatasetSplit(name, instances)


def dumps_split(split: DatasetSplit) -> str:
    return "".join(json.dumps(inst.to_json(), ensure_ascii=False) + "\n" for inst in split)


def save_recam_jsonl(split: DatasetSplit, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_split(split), encoding="utf-8")


# -- synthetic data ---------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


def _word_pool(count: int, syllables: int, offset: int = 0) -> List[str]:
    """Deterministic pronounceable pseudo-words, e.g. ``'bada'``."""
    cv = [o + v for o in _ONSETS for v in _VOWELS]
    words = []
    i = offset
    while len(words) < count:
        n, parts = i, []
        for _ in range(syllables):
            parts.append(cv[n % len(cv)])
            n //= len(cv)
        words.append("".join(parts))
        i += 1
    return words


FILLER_WORDS = _word_pool(120, 2)
OPTION_WORDS = _word_pool(60, 3, offset=7)
SYNTHETIC_RULES = ("copy", "majority")


def make_synthetic_dataset(rule: str, n: int, rng: Union[RandomSource, int] = 0,
                           article_len: int = 40, question_len: int = 6,
                           name: str = "train") -> DatasetSplit:
    """Instances whose label is recoverable from the article under a planted rule.

    ``copy``: the gold option is the only option that occurs verbatim in the
    article.  ``majority``: every option may occur, the gold one strictly
    most often.
    """
    rule = rule.lower()
    if rule not in SYNTHETIC_RULES:
        raise ConfigurationError(f"unknown synthetic rule {rule!r}; choose from {SYNTHETIC_RULES}")
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    if isinstance(rng, int):
        rng = RandomSource(rng)
    gen = rng.generator
    instances = []
    for idx in range(n):
        options = [OPTION_WORDS[j] for j in gen.choice(len(OPTION_WORDS), NUM_OPTIONS, replace=False)]
        label = int(gen.integers(NUM_OPTIONS))
        words = [FILLER_WORDS[j] for j in gen.integers(len(FILLER_WORDS), size=article_len)]
        if rule == "copy":
            inserts = [options[label]]
        else:
            gold = int(gen.integers(2, 4))
            inserts = [options[label]] * gold
            for i, opt in enumerate(options):
                if i != label:
                    inserts += [opt] * int(gen.integers(0, gold))
        positions = gen.choice(article_len, len(inserts), replace=False)
        for pos, word in zip(positions, inserts):
            words[pos] = word
        q = [FILLER_WORDS[j] for j in gen.integers(len(FILLER_WORDS), size=question_len)]
        q[int(gen.integers(question_len))] = PLACEHOLDER
        instances.append(RecamInstance(" ".join(words) + " .", " ".join(q), tuple(options),
                                       label, id=idx + 1))
    return DatasetSplit(name, instances)
