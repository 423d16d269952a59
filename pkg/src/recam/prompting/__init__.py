"""Prompt-based option scoring with pluggable backends."""

from .backends import (ECHO, NEXT_TOKEN, CachedBackend, EchoResult, MockScorer, MockSpec,
                       NextTokenResult, ResponseCache, ScorerBackend, adversarial_mock, mock_scorer,
                       oracle_mock, uniform_mock)
from .http import HttpLimits, HttpScorer, http_scorer
from .selection import (PromptEvalReport, PromptResult, argmax_lowest, complete_echo_select,
                        fill_back_echo_select, multi_choice_select, run_prompt_eval, select)
from .templates import (SYSTEM_PROMPT, FewShotConfig, PromptStyle, render_echo_texts,
                        render_multi_choice, render_prompt)

__all__ = [
    "ECHO", "NEXT_TOKEN", "CachedBackend", "EchoResult", "MockScorer", "MockSpec",
    "NextTokenResult", "ResponseCache", "ScorerBackend", "adversarial_mock", "mock_scorer",
    "oracle_mock", "uniform_mock", "HttpLimits", "HttpScorer", "http_scorer", "PromptEvalReport",
    "PromptResult", "argmax_lowest", "complete_echo_select", "fill_back_echo_select",
    "multi_choice_select", "run_prompt_eval", "select", "SYSTEM_PROMPT", "FewShotConfig",
    "PromptStyle", "render_echo_texts", "render_multi_choice", "render_prompt",
]
