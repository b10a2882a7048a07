"""Held-out accuracy under the direct template."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from metacog_rl.envlab.codec import ChainCodec
from metacog_rl.policy.base import PolicyBackend
from metacog_rl.policy.softmax import SoftmaxBackend, SoftmaxSequencePolicy
from metacog_rl.templates import TemplateSet, builtin_templates
from metacog_rl.types import Problem, Stage
from metacog_rl.verify import AnswerKey, binary_reward


def chain_success_probability(policy: SoftmaxSequencePolicy, cues: np.ndarray, first_prev: int,
                              answer: int) -> float:
    """Exact probability that the last emitted token equals ``answer``.

    Forward recursion over the previous-token distribution.
    """
    probs = policy.prob_table()
    V = policy.vocab_size
    dist = np.zeros(V + 1)
    dist[policy.bos if first_prev < 0 else first_prev] = 1.0
    for cue in cues:
        rows = policy.context_index(np.full(V + 1, cue), np.arange(V + 1))
        nxt = dist @ probs[rows]
        dist = np.zeros(V + 1)
        dist[:V] = nxt
    return float(dist[answer])


def expected_accuracy(backend: SoftmaxBackend, problems: Sequence[Problem],
                      templates: Optional[TemplateSet] = None) -> float:
    """Mean single-sample success probability over ``problems`` with the direct prompt."""
    if not isinstance(backend.codec, ChainCodec):
        raise TypeError("exact evaluation needs a chain codec")
    templates = templates or builtin_templates()
    total = 0.0
    for p in problems:
        text = templates.render(Stage.DIRECT, p.text).text
        cues, first_prev = backend.codec.layout(text)
        total += chain_success_probability(backend.policy, cues, first_prev, int(p.answer))
    return total / len(problems)


def sampled_accuracy(backend: PolicyBackend, problems: Sequence[Problem], samples: int = 1,
                     templates: Optional[TemplateSet] = None) -> float:
    """Fraction of correct direct-template samples (``samples`` per problem)."""
    templates = templates or builtin_templates()
    prompts = [templates.render(Stage.DIRECT, p.text) for p in problems]
    groups = backend.sample_groups(prompts, samples)
    hits = sum(binary_reward(AnswerKey.from_raw(p.answer), s.text) == 1
               for p, group in zip(problems, groups) for s in group)
    return hits / (len(problems) * samples)
