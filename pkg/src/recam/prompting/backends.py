"""Scorer backends: the interface, a deterministic offline mock, and a disk cache."""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from ..data import NUM_OPTIONS, DatasetSplit, RecamInstance
from ..errors import CapabilityError, FormatError
from .templates import DIGITS, target_block

ECHO = "echo_logprobs"
NEXT_TOKEN = "next_token_distribution"


@dataclass
class EchoResult:
    """Per-token log-probabilities for an echoed text.  ``logprobs[0]`` may be None."""

    tokens: List[str]
    offsets: List[int]
    logprobs: List[Optional[float]]
    raw: dict = field(default_factory=dict)

    def span_logprobs(self, start: int, end: int) -> List[float]:
        """Log-probabilities of every token overlapping the character span ``[start, end)``."""
        out = []
        for tok, off, lp in zip(self.tokens, self.offsets, self.logprobs):
            if off < end and off + len(tok) > start and len(tok.strip()):
                out.append(float("-inf") if lp is None else lp)
        return out


@dataclass
class NextTokenResult:
    logprobs: Dict[str, float]
    generated: Optional[str] = None
    raw: dict = field(default_factory=dict)


class ScorerBackend:
    identity: str = "backend"
    capabilities: FrozenSet[str] = frozenset()
    max_in_flight: int = 1

    def require(self, capability: str) -> None:
        if capability not in self.capabilities:
            raise CapabilityError(f"backend {self.identity!r} does not support {capability}")

    def echo_logprobs(self, text: str) -> EchoResult:
        raise CapabilityError(f"backend {self.identity!r} does not support {ECHO}")

    def next_token(self, prompt: str) -> NextTokenResult:
        raise CapabilityError(f"backend {self.identity!r} does not support {NEXT_TOKEN}")


# -- mock -------------------------------------------------------------------

_MOCK_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def mock_tokens(text: str) -> Tuple[List[str], List[int]]:
    toks, offs = [], []
    for m in _MOCK_TOKEN_RE.finditer(text):
        toks.append(m.group())
        offs.append(m.start())
    return toks, offs


@dataclass
class MockSpec:
    """Rules for :class:`MockScorer`.

    ``token_logprobs`` maps lowercased echo tokens to log-probabilities and
    ``digit_logprobs`` maps answer digits to next-token log-probabilities;
    anything unlisted gets ``default_logprob``.  When ``answer_key`` is set
    it overrides both: the mock locates the target instance inside the
    prompt (by its article) and gives ``favoured_logprob`` to option
    ``answer_key[...]`` and ``other_logprob`` to the rest.
    """

    token_logprobs: Dict[str, float] = field(default_factory=dict)
    digit_logprobs: Dict[str, float] = field(default_factory=dict)
    default_logprob: float = -5.0
    answer_key: Dict[str, List[Tuple[RecamInstance, int]]] = field(default_factory=dict)
    favoured_logprob: float = -0.1
    other_logprob: float = -5.0
    generate_only: bool = False
    generation: Optional[str] = None
    name: str = "mock"


class MockScorer(ScorerBackend):
    capabilities = frozenset({ECHO, NEXT_TOKEN})

    def __init__(self, spec: Optional[MockSpec] = None):
        self.spec = spec or MockSpec()
        self.identity = f"mock:{self.spec.name}"
        self.calls = 0

    def _target(self, prompt: str) -> Optional[Tuple[RecamInstance, int]]:
        block = target_block(prompt)
        article = block[len("Article: "):].split("\nQuestion: ", 1)[0]
        for inst, favoured in self.spec.answer_key.get(article, []):
            if inst.question in block or any(inst.fill(i) in block for i in range(NUM_OPTIONS)):
                return inst, favoured
        return None

    def _candidate(self, inst: RecamInstance, text: str) -> Optional[int]:
        block = target_block(text)
        question_line = block.split("\nQuestion: ", 1)[-1].split("\n", 1)[0]
        for i in range(NUM_OPTIONS):
            if question_line == inst.fill(i):
                return i
        answer = block.rsplit("\nAnswer: ", 1)
        if len(answer) == 2:
            for i, opt in enumerate(inst.options):
                if answer[1] == opt:
                    return i
        return None

    def echo_logprobs(self, text: str) -> EchoResult:
        self.calls += 1
        spec = self.spec
        toks, offs = mock_tokens(text)
        if spec.answer_key:
            hit = self._target(text)
            if hit is not None:
                inst, favoured = hit
                lp = spec.favoured_logprob if self._candidate(inst, text) == favoured else spec.other_logprob
                start = len(text) - len(target_block(text))
                lps = [lp if off >= start else spec.default_logprob for off in offs]
                return EchoResult(toks, offs, lps, {"mock": spec.name})
        lps = [spec.token_logprobs.get(t.lower(), spec.default_logprob) for t in toks]
        return EchoResult(toks, offs, lps, {"mock": spec.name})

    def next_token(self, prompt: str) -> NextTokenResult:
        self.calls += 1
        spec = self.spec
        if spec.answer_key:
            hit = self._target(prompt)
            dist = {d: spec.other_logprob for d in DIGITS}
            if hit is not None:
                dist[DIGITS[hit[1]]] = spec.favoured_logprob
        else:
            dist = {d: spec.digit_logprobs.get(d, spec.default_logprob) for d in DIGITS}
        if spec.generate_only:
            generated = spec.generation
            if generated is None:
                generated = max(DIGITS, key=lambda d: (dist[d], -int(d)))
            return NextTokenResult({}, generated, {"mock": spec.name, "generated": generated})
        return NextTokenResult(dist, None, {"mock": spec.name, "top_logprobs": dist})


def mock_scorer(spec: Optional[MockSpec] = None) -> MockScorer:
    return MockScorer(spec)


def _key(split: Sequence[RecamInstance], pick) -> Dict[str, List[Tuple[RecamInstance, int]]]:
    key: Dict[str, List[Tuple[RecamInstance, int]]] = {}
    for inst in split:
        key.setdefault(inst.article, []).append((inst, pick(inst)))
    return key


def oracle_mock(split: Sequence[RecamInstance]) -> MockScorer:
    """Gold digit / gold option tokens at -0.1, everything else at -5."""
    return MockScorer(MockSpec(answer_key=_key(split, lambda i: i.label), name="oracle"))


def adversarial_mock(split: Sequence[RecamInstance]) -> MockScorer:
    """Always favours the option after the gold one, so every answer is wrong."""
    return MockScorer(MockSpec(answer_key=_key(split, lambda i: (i.label + 1) % NUM_OPTIONS),
                               name="adversarial"))


def uniform_mock() -> MockScorer:
    return MockScorer(MockSpec(name="uniform"))


# -- caching ------------------------------------------------------------------

def request_key(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed JSON files; atomic writes, concurrent readers allowed."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        path = self.path(key)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            self.misses += 1
            return None
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            raise FormatError(f"corrupt cache entry {path}") from None
        self.hits += 1
        return value

    def put(self, key: str, value: dict) -> None:
        path = self.path(key)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(value, fh, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, path)


class CachedBackend(ScorerBackend):
    """Wraps any backend so repeated queries are answered from disk."""

    def __init__(self, backend: ScorerBackend, cache_dir):
        self.backend = backend
        self.cache = ResponseCache(cache_dir)
        self.identity = backend.identity
        self.capabilities = backend.capabilities
        self.max_in_flight = backend.max_in_flight

    def echo_logprobs(self, text: str) -> EchoResult:
        self.require(ECHO)
        key = request_key({"backend": self.identity, "op": ECHO, "text": text})
        hit = self.cache.get(key)
        if hit is None:
            res = self.backend.echo_logprobs(text)
            hit = {"tokens": res.tokens, "offsets": res.offsets, "logprobs": res.logprobs,
                   "raw": res.raw}
            self.cache.put(key, hit)
        return EchoResult(hit["tokens"], hit["offsets"], hit["logprobs"], hit["raw"])

    def next_token(self, prompt: str) -> NextTokenResult:
        self.require(NEXT_TOKEN)
        key = request_key({"backend": self.identity, "op": NEXT_TOKEN, "prompt": prompt})
        hit = self.cache.get(key)
        if hit is None:
            res = self.backend.next_token(prompt)
            hit = {"logprobs": res.logprobs, "generated": res.generated, "raw": res.raw}
            self.cache.put(key, hit)
        return NextTokenResult(hit["logprobs"], hit["generated"], hit["raw"])
