"""Answer extraction, equivalence and the binary verifiable reward."""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

ANSWER_MARKER = "Answer:"

_DECIMAL = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)$")
_FRACTION = re.compile(r"^([+-]?\d+)\s*/\s*([+-]?\d+)$")
_WS = re.compile(r"\s+")


class MalformedGroupError(ValueError):
    """Raised for an empty reward group."""


def parse_rational(text: str) -> Optional[Fraction]:
    """Exact value of an integer, finite decimal or ``p/q`` string, else None."""
    s = text.strip()
    if _DECIMAL.match(s):
        return Fraction(s)
    m = _FRACTION.match(s)
    if m:
        den = int(m.group(2))
        if den == 0:
            return None
        return Fraction(int(m.group(1)), den)
    return None


def normalize(text: str) -> str:
    value = parse_rational(text)
    if value is not None:
        if value.denominator == 1:
            return str(value.numerator)
        return f"{value.numerator}/{value.denominator}"
    return _WS.sub(" ", text.strip()).casefold()


@dataclass(frozen=True)
class AnswerKey:
    raw: str
    normalized: str

    @classmethod
    def from_raw(cls, raw: str) -> "AnswerKey":
        return cls(raw=raw, normalized=normalize(raw))


@dataclass(frozen=True)
class Verdict:
    extracted: Optional[str]
    equivalent: bool

    @property
    def reward(self) -> int:
        return 1 if self.equivalent else -1


def _strip_math(s: str) -> str:
    s = s.strip()
    for delim in ("$$", "$"):
        if len(s) >= 2 * len(delim) and s.startswith(delim) and s.endswith(delim):
            return s[len(delim) : -len(delim)].strip()
    return s


def extract_answer(completion_text: str) -> Optional[str]:
    """Content of the last line starting with ``Answer:``; None when absent."""
    found = None
    for line in completion_text.splitlines():
        stripped = line.lstrip()
        if stripped.startswith(ANSWER_MARKER):
            found = stripped[len(ANSWER_MARKER) :]
    if found is None:
        return None
    return _strip_math(found)


def _as_key(ground_truth) -> AnswerKey:
    return ground_truth if isinstance(ground_truth, AnswerKey) else AnswerKey.from_raw(ground_truth)


def is_equivalent(ground_truth: AnswerKey | str, candidate: Optional[str]) -> bool:
    if candidate is None:
        return False
    return _as_key(ground_truth).normalized == normalize(candidate)


def judge(ground_truth: AnswerKey | str, completion_text: str) -> Verdict:
    extracted = extract_answer(completion_text)
    return Verdict(extracted=extracted, equivalent=is_equivalent(ground_truth, extracted))


def binary_reward(ground_truth: AnswerKey | str, completion_text: str) -> int:
    """+1 when the extracted answer matches the key, -1 otherwise (incl. no answer)."""
    return judge(ground_truth, completion_text).reward


def group_accuracy(rewards: Iterable[int]) -> float:
    rewards = list(rewards)
    if not rewards:
        raise MalformedGroupError("group_accuracy of an empty reward group")
    return sum(1 for r in rewards if r == 1) / len(rewards)
