"""Prompt rendering for the three prompting styles, with few-shot examples."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

from ..data import NUM_OPTIONS, DatasetSplit, RecamInstance
from ..errors import ConfigurationError
from ..tensor import RandomSource

SYSTEM_PROMPT = (
    "Given the article below and the corresponding question, you are expected to choose the "
    "correct answer from five candidates to fill the @placeholder in cloze-style machine reading "
    "comprehension tasks. Output the answer as a single number, choosing an option from "
    "[0,1,2,3,4] that best fits the @placeholder in the question. I will provide you with a "
    "few-shot examples to help you understand the task better."
)
ANSWER_CUE = "Answer:"
DIGITS = tuple(str(i) for i in range(NUM_OPTIONS))


class PromptStyle(str, enum.Enum):
    FILL_BACK_ECHO = "fill-back-echo"
    COMPLETE_ECHO = "complete-echo"
    MULTI_CHOICE = "multi-choice"

    @classmethod
    def parse(cls, value) -> "PromptStyle":
        if isinstance(value, PromptStyle):
            return value
        key = str(value).lower().replace("_", "-")
        for style in cls:
            if key in (style.value, style.value.replace("-", "")):
                return style
        raise ConfigurationError(f"unknown prompt style {value!r}")


@dataclass
class FewShotConfig:
    """``k`` solved examples drawn from ``pool`` (first-k, or seeded-random per target)."""

    k: int = 0
    pool: Optional[DatasetSplit] = None
    selection: str = "first"
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ConfigurationError("k must be non-negative")
        if self.selection not in ("first", "random"):
            raise ConfigurationError(f"unknown few-shot selection {self.selection!r}")

    def with_k(self, k: int) -> "FewShotConfig":
        return FewShotConfig(k, self.pool, self.selection, self.seed)


def _fingerprint(inst: RecamInstance) -> str:
    blob = "\x1f".join([inst.article, inst.question, *inst.options])
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def check_disjoint(pool: Optional[DatasetSplit], split: Sequence[RecamInstance]) -> None:
    if pool is None:
        return
    seen = {_fingerprint(i) for i in pool}
    for inst in split:
        if _fingerprint(inst) in seen:
            raise ConfigurationError(f"few-shot pool {pool.name!r} overlaps the evaluation split "
                                     f"(instance {inst.id})")


def select_examples(target: RecamInstance, fewshot: Optional[FewShotConfig]) -> List[RecamInstance]:
    if fewshot is None or fewshot.k == 0:
        return []
    pool = fewshot.pool
    if pool is None or fewshot.k > len(pool):
        size = 0 if pool is None else len(pool)
        raise ConfigurationError(f"k={fewshot.k} exceeds the few-shot pool size {size}")
    if any(inst.label is None for inst in pool):
        raise ConfigurationError("few-shot examples must be labeled")
    if fewshot.selection == "first":
        return list(pool.instances[:fewshot.k])
    key = int(_fingerprint(target)[:15], 16)
    picks = RandomSource(fewshot.seed).spawn(key).generator.choice(len(pool), fewshot.k,
                                                                   replace=False)
    return [pool.instances[int(i)] for i in sorted(picks)]


@dataclass
class EchoText:
    """A text to echo and the character span of the option inside it."""

    text: str
    span: Tuple[int, int]


def _mc_block(inst: RecamInstance, answer: Optional[int]) -> str:
    lines = [f"Article: {inst.article}", f"Question: {inst.question}", "Options:"]
    lines += [f"{i}: {opt}" for i, opt in enumerate(inst.options)]
    lines.append(ANSWER_CUE if answer is None else f"{ANSWER_CUE} {answer}")
    return "\n".join(lines)


def _fill_back(inst: RecamInstance, option: int) -> Tuple[str, Tuple[int, int]]:
    head = f"Article: {inst.article}\nQuestion: "
    filled = inst.fill(option)
    lower = inst.question.lower().find("@placeholder")
    start = len(head) + lower
    return head + filled, (start, start + len(inst.options[option]))


def _complete(inst: RecamInstance, option: int) -> Tuple[str, Tuple[int, int]]:
    head = f"Article: {inst.article}\nQuestion: {inst.question}\n{ANSWER_CUE} "
    text = head + inst.options[option]
    return text, (len(head), len(text))


def render_echo_texts(inst: RecamInstance, style: PromptStyle,
                      fewshot: Optional[FewShotConfig] = None) -> List[EchoText]:
    style = PromptStyle.parse(style)
    build = {PromptStyle.FILL_BACK_ECHO: _fill_back, PromptStyle.COMPLETE_ECHO: _complete}.get(style)
    if build is None:
        raise ConfigurationError(f"{style.value} is not an echo style")
    examples = [build(ex, ex.label)[0] for ex in select_examples(inst, fewshot)]
    prefix = "".join(e + "\n\n" for e in examples)
    out = []
    for i in range(NUM_OPTIONS):
        text, (s, e) = build(inst, i)
        out.append(EchoText(prefix + text, (len(prefix) + s, len(prefix) + e)))
    return out


def render_multi_choice(inst: RecamInstance, fewshot: Optional[FewShotConfig] = None) -> str:
    parts = [SYSTEM_PROMPT]
    parts += [_mc_block(ex, ex.label) for ex in select_examples(inst, fewshot)]
    parts.append(_mc_block(inst, None))
    return "\n\n".join(parts)


def render_prompt(inst: RecamInstance, style, fewshot: Optional[FewShotConfig] = None
                  ) -> Union[str, List[str]]:
    """One prompt for multi-choice, five texts for the echo styles."""
    style = PromptStyle.parse(style)
    if style is PromptStyle.MULTI_CHOICE:
        return render_multi_choice(inst, fewshot)
    return [t.text for t in render_echo_texts(inst, style, fewshot)]


def target_block(prompt: str) -> str:
    """The final ``Article:`` block of a rendered prompt (the instance being asked about)."""
    idx = prompt.rfind("Article: ")
    return prompt if idx < 0 else prompt[idx:]
