"""Option selection for each prompting style, and whole-split evaluation."""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ..data import NUM_OPTIONS, RecamInstance
from ..errors import ConfigurationError, DataError, ParseError, TransportError
from .backends import ECHO, NEXT_TOKEN, ScorerBackend
from .templates import (DIGITS, FewShotConfig, PromptStyle, check_disjoint, render_echo_texts,
                        render_multi_choice)

_DIGIT_RE = re.compile(r"[0-4]")


@dataclass
class PromptResult:
    instance_id: Optional[int]
    style: str
    scores: List[float]
    chosen: Optional[int]
    prompt: object
    raw: object = None
    label: Optional[int] = None
    k: int = 0
    error: Optional[str] = None

    @property
    def correct(self) -> bool:
        return self.chosen is not None and self.chosen == self.label

    def to_json(self) -> dict:
        out = asdict(self)
        out["scores"] = [s if math.isfinite(s) else None for s in self.scores]
        out["correct"] = self.correct
        return out


def argmax_lowest(scores: Sequence[float]) -> int:
    """Index of the largest score; ties go to the lowest index."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def _score(lps: List[float], mean: bool) -> float:
    if not lps:
        return float("-inf")
    total = math.fsum(lps)
    return total / len(lps) if mean else total


def _echo_select(inst: RecamInstance, backend: ScorerBackend, fewshot, style: PromptStyle,
                 mean: bool) -> PromptResult:
    backend.require(ECHO)
    texts = render_echo_texts(inst, style, fewshot)
    scores, raws = [], []
    for et in texts:
        res = backend.echo_logprobs(et.text)
        scores.append(_score(res.span_logprobs(*et.span), mean))
        raws.append(res.raw)
    return PromptResult(inst.id, style.value, scores, argmax_lowest(scores),
                        [t.text for t in texts], raws, inst.label, _k(fewshot))


def _k(fewshot: Optional[FewShotConfig]) -> int:
    return 0 if fewshot is None else fewshot.k


def fill_back_echo_select(inst: RecamInstance, backend: ScorerBackend,
                          fewshot: Optional[FewShotConfig] = None) -> PromptResult:
    """Sum of log-probabilities over the option's tokens at the placeholder site."""
    return _echo_select(inst, backend, fewshot, PromptStyle.FILL_BACK_ECHO, mean=False)


def complete_echo_select(inst: RecamInstance, backend: ScorerBackend,
                         fewshot: Optional[FewShotConfig] = None) -> PromptResult:
    """Mean log-probability of the appended option tokens (length-normalised)."""
    return _echo_select(inst, backend, fewshot, PromptStyle.COMPLETE_ECHO, mean=True)


def parse_generated_digit(text: Optional[str]) -> int:
    m = _DIGIT_RE.search(text or "")
    if m is None:
        raise ParseError(f"no option digit in generation {text!r}")
    return int(m.group())


def multi_choice_select(inst: RecamInstance, backend: ScorerBackend,
                        fewshot: Optional[FewShotConfig] = None) -> PromptResult:
    backend.require(NEXT_TOKEN)
    prompt = render_multi_choice(inst, fewshot)
    res = backend.next_token(prompt)
    result = PromptResult(inst.id, PromptStyle.MULTI_CHOICE.value, [float("-inf")] * NUM_OPTIONS,
                          None, prompt, res.raw, inst.label, _k(fewshot))
    if res.logprobs:
        result.scores = [float(res.logprobs.get(d, float("-inf"))) for d in DIGITS]
        if any(math.isfinite(s) for s in result.scores):
            result.chosen = argmax_lowest(result.scores)
            return result
    try:
        digit = parse_generated_digit(res.generated)
    except ParseError as exc:
        result.error = f"ParseError: {exc}"
        return result
    result.scores[digit] = 0.0
    result.chosen = digit
    return result


SELECTORS = {
    PromptStyle.FILL_BACK_ECHO: fill_back_echo_select,
    PromptStyle.COMPLETE_ECHO: complete_echo_select,
    PromptStyle.MULTI_CHOICE: multi_choice_select,
}


def select(inst: RecamInstance, style, backend: ScorerBackend,
           fewshot: Optional[FewShotConfig] = None) -> PromptResult:
    return SELECTORS[PromptStyle.parse(style)](inst, backend, fewshot)


@dataclass
class PromptEvalReport:
    style: str
    backend: str
    accuracy: Dict[int, float]
    errors: Dict[int, Dict[str, int]]
    results: Dict[int, List[PromptResult]] = field(repr=False, default_factory=dict)

    def summary(self) -> dict:
        return {"style": self.style, "backend": self.backend,
                "accuracy": {str(k): v for k, v in self.accuracy.items()},
                "errors": {str(k): v for k, v in self.errors.items()}}


def _safe_select(inst, style, backend, fewshot) -> PromptResult:
    try:
        return select(inst, style, backend, fewshot)
    except TransportError as exc:
        if exc.instance_id is None:
            exc.instance_id = inst.id
        kind, msg = type(exc).__name__, str(exc)
    except (ParseError, DataError) as exc:
        kind, msg = type(exc).__name__, str(exc)
    return PromptResult(inst.id, PromptStyle.parse(style).value, [float("-inf")] * NUM_OPTIONS,
                        None, None, None, inst.label, _k(fewshot), f"{kind}: {msg}")


def run_prompt_eval(split: Sequence[RecamInstance], style, backend: ScorerBackend,
                    fewshot: Optional[FewShotConfig] = None, shots: Sequence[int] = (0,),
                    audit_path: Optional[Path] = None, workers: Optional[int] = None
                    ) -> PromptEvalReport:
    """Accuracy for every ``k`` in ``shots``; failed instances count as wrong.

    Results keep dataset order whatever order the requests complete in.
    Capability and configuration problems abort the run, everything else
    is recorded per instance and tallied in ``errors``.
    """
    style = PromptStyle.parse(style)
    shots = list(shots)
    if not shots:
        raise ConfigurationError("shots must list at least one k")
    instances = list(split)
    if not instances:
        raise DataError("cannot evaluate an empty split")
    if any(inst.label is None for inst in instances):
        raise DataError("prompt evaluation needs a labeled split")
    base = fewshot or FewShotConfig()
    check_disjoint(base.pool, instances)
    backend.require(NEXT_TOKEN if style is PromptStyle.MULTI_CHOICE else ECHO)
    workers = workers or max(1, backend.max_in_flight)

    report = PromptEvalReport(style.value, backend.identity, {}, {})
    audit = None
    if audit_path is not None:
        audit_path = Path(audit_path)
        audit_path.parent.mkdir(parents=True, exist_ok=True)
        audit = audit_path.open("w", encoding="utf-8")
    try:
        for k in shots:
            cfg = base.with_k(k)
            if k > 0 and (cfg.pool is None or k > len(cfg.pool)):
                size = 0 if cfg.pool is None else len(cfg.pool)
                raise ConfigurationError(f"k={k} exceeds the few-shot pool size {size}")
            if workers == 1:
                results = [_safe_select(inst, style, backend, cfg) for inst in instances]
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(lambda inst: _safe_select(inst, style, backend, cfg),
                                            instances))
            report.results[k] = results
            report.accuracy[k] = sum(r.correct for r in results) / len(results)
            counts: Dict[str, int] = {}
            for r in results:
                if r.error:
                    name = r.error.split(":", 1)[0]
                    counts[name] = counts.get(name, 0) + 1
            report.errors[k] = counts
            if audit is not None:
                for r in results:
                    audit.write(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
    finally:
        if audit is not None:
            audit.close()
    return report


__all__ = ["PromptResult", "PromptEvalReport", "argmax_lowest", "fill_back_echo_select",
           "complete_echo_select", "multi_choice_select", "parse_generated_digit", "select",
           "run_prompt_eval"]
