from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from metacog_rl.templates import RenderedPrompt
from metacog_rl.types import CompletionSample, Stage


class UnsupportedCapabilityError(RuntimeError):
    pass


class TransportError(RuntimeError):
    """Retriable failure talking to a remote backend."""


@dataclass(frozen=True)
class Capabilities:
    can_sample: bool = True
    can_score: bool = False
    can_update: bool = False


class PolicyBackend:
    """Common surface: sampling groups, optional scoring and gradient updates.

    Subclasses override what their capabilities allow. ``calls`` and
    ``samples_drawn`` count sampling work per template kind.
    """

    capabilities = Capabilities()

    def __init__(self):
        self.calls: Counter = Counter()
        self.samples_drawn: Counter = Counter()

    def _count(self, prompt: RenderedPrompt, group_size: int) -> None:
        if not self.capabilities.can_sample:
            raise UnsupportedCapabilityError(f"{type(self).__name__} cannot sample")
        if group_size < 1:
            raise ValueError(f"group_size must be positive, got {group_size}")
        self.calls[Stage(prompt.kind)] += 1
        self.samples_drawn[Stage(prompt.kind)] += group_size

    def sample_group(self, prompt: RenderedPrompt, group_size: int) -> list[CompletionSample]:
        raise NotImplementedError

    def sample_groups(self, prompts: Sequence[RenderedPrompt], group_size: int) -> list[list[CompletionSample]]:
        return [self.sample_group(p, group_size) for p in prompts]

    def score_tokens(self, prompt: str, tokens: Sequence[int]) -> np.ndarray:
        raise UnsupportedCapabilityError(f"{type(self).__name__} cannot score tokens")

    def logprob_grad(self, prompt: str, tokens: Sequence[int], weights: np.ndarray) -> np.ndarray:
        raise UnsupportedCapabilityError(f"{type(self).__name__} has no parameters to differentiate")

    def encode(self, prompt: str, text: str) -> tuple[int, ...]:
        raise UnsupportedCapabilityError(f"{type(self).__name__} cannot tokenize targets")

    def apply_gradient(self, grad: np.ndarray, learning_rate: float) -> "PolicyBackend":
        raise UnsupportedCapabilityError(f"{type(self).__name__} cannot be updated")

    @property
    def num_params(self) -> int:
        raise UnsupportedCapabilityError(f"{type(self).__name__} has no parameters")

    def begin_step(self, step: int) -> None:
        """Hook called by the training loop before each step's rollouts."""
