"""Stochastic stand-in policy with fixed per-stage success probabilities."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from metacog_rl.policy.base import Capabilities, PolicyBackend
from metacog_rl.templates import RenderedPrompt, StructuredSolution, serialize_solution
from metacog_rl.types import CompletionSample, Stage
from metacog_rl.verify import parse_rational


def wrong_answer(answer: str, rng: np.random.Generator) -> str:
    """A string never equivalent to ``answer``."""
    value = parse_rational(answer)
    if value is not None:
        return str(value + int(rng.integers(1, 10)))
    return f"not {answer}"


class ScriptedPolicy(PolicyBackend):
    """Answers each prompt correctly with a probability chosen by template kind.

    ``answers`` maps problem text to its ground truth. ``difficulty_success``
    overrides the probabilities for problems whose difficulty label matches,
    and ``direct_gain`` raises the direct-template probability by that amount
    per training step (capped at 1), simulating a policy that improves.
    """

    capabilities = Capabilities(can_sample=True, can_score=False, can_update=False)

    def __init__(
        self,
        success: Mapping[Stage, float],
        answers: Mapping[str, str] | Callable[[str], str],
        rng_seed: int = 0,
        difficulty: Optional[Mapping[str, str]] = None,
        difficulty_success: Optional[Mapping[str, Mapping[Stage, float]]] = None,
        direct_gain: float = 0.0,
    ):
        super().__init__()
        self.success = {Stage(k): float(v) for k, v in success.items()}
        for table in [self.success, *(difficulty_success or {}).values()]:
            for k, p in table.items():
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"success probability for {Stage(k).value} must lie in [0, 1], got {p}")
        self._answers = answers
        self.difficulty = dict(difficulty or {})
        self.difficulty_success = {d: {Stage(k): float(v) for k, v in t.items()}
                                   for d, t in (difficulty_success or {}).items()}
        self.direct_gain = float(direct_gain)
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.step = 0

    def begin_step(self, step: int) -> None:
        self.step = step

    def answer_for(self, problem: str) -> str:
        if callable(self._answers):
            return self._answers(problem)
        return self._answers[problem]

    def probability(self, kind: Stage, problem: str) -> float:
        table = self.difficulty_success.get(self.difficulty.get(problem, ""), {})
        p = table.get(kind, self.success.get(kind, 0.0))
        if kind is Stage.DIRECT and self.direct_gain:
            p = min(1.0, p + self.direct_gain * max(self.step - 1, 0))
        return p

    def _completion(self, kind: Stage, problem: str, answer: str) -> str:
        if kind is Stage.DIRECT:
            return f"Working through the problem directly.\nAnswer: {answer}"
        steps = (
            ("Restate what is asked.", problem),
            ("Work out the result.", answer),
        )
        return serialize_solution(StructuredSolution(steps, answer))

    def sample_group(self, prompt: RenderedPrompt, group_size: int) -> list[CompletionSample]:
        self._count(prompt, group_size)
        kind = Stage(prompt.kind)
        truth = self.answer_for(prompt.problem)
        hits = self.rng.random(group_size) < self.probability(kind, prompt.problem)
        out = []
        for hit in hits:
            answer = truth if hit else wrong_answer(truth, self.rng)
            out.append(CompletionSample(stage=kind, problem=None, prompt=prompt.text,
                                        text=self._completion(kind, prompt.problem, answer)))
        return out
