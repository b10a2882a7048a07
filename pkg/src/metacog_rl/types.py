"""Data records shared across the pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from metacog_rl.templates import StructuredSolution


class Stage(str, enum.Enum):
    """Rollout stage; doubles as the prompt-template selector."""

    DIRECT = "direct"
    DECOMPOSITION = "decomposition"
    REFLECTION = "reflection"

    @property
    def is_metacognitive(self) -> bool:
        return self is not Stage.DIRECT


# One enum serves both roles: every stage renders exactly one template.
TemplateKind = Stage
StageTag = Stage
STAGES = (Stage.DIRECT, Stage.DECOMPOSITION, Stage.REFLECTION)


@dataclass(frozen=True)
class Problem:
    id: str
    text: str
    answer: str
    difficulty: str = "default"


@dataclass
class CompletionSample:
    """One policy output for one rendered prompt."""

    stage: Stage
    problem: Problem
    prompt: str
    text: str
    tokens: Optional[tuple[int, ...]] = None
    logprobs: Optional[np.ndarray] = None  # under the generating (old) policy
    extracted: Optional[str] = None
    reward: int = -1
    failed: bool = False
    structured: Optional["StructuredSolution"] = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return 0 if self.tokens is None else len(self.tokens)
