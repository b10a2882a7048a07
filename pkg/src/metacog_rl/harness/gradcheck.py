"""Randomized finite-difference checks of the objective's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from metacog_rl.envlab.codec import CharCodec
from metacog_rl.objective import ClipConfig, RolloutGroup, combined_loss, dapo_loss, finite_diff_check, sft_loss
from metacog_rl.policy.softmax import SoftmaxBackend, SoftmaxSequencePolicy
from metacog_rl.templates import RenderedPrompt
from metacog_rl.types import Problem, Stage

ALPHABET = "abcde"
# the min() in the clipped loss has a kink at each clip boundary
KINK_MARGIN = 1e-3


@dataclass
class GradcheckInstance:
    backend: SoftmaxBackend
    groups: list[RolloutGroup]
    pairs: list[tuple[str, str]]
    clip: ClipConfig
    lam: float


def _mixed_rewards(rng: np.random.Generator, g: int) -> list[int]:
    r = [int(x) for x in rng.choice([-1, 1], size=g)]
    if len(set(r)) == 1:
        r[0] = -r[0]
    return r


def random_instance(rng: np.random.Generator, max_tries: int = 100) -> GradcheckInstance:
    """Small softmax policy, a mixed batch sampled from perturbed old parameters, and SFT pairs.

    New parameters are redrawn until every ratio sits at least KINK_MARGIN
    away from both clip boundaries.
    """
    vocab = int(rng.integers(2, len(ALPHABET) + 1))
    length = int(rng.integers(1, 4))
    codec = CharCodec(ALPHABET[:vocab], length)
    order = int(rng.integers(0, 2))
    old = SoftmaxSequencePolicy(vocab, order, 1, params=rng.normal(0, 1, size=(vocab + 1 if order else 1, vocab)),
                                rng_seed=int(rng.integers(2**31)))
    backend = SoftmaxBackend(old, codec)
    clip = ClipConfig()
    groups = []
    for j in range(int(rng.integers(1, 4))):
        prompt = RenderedPrompt(Stage.DIRECT, f"p{j}", f"p{j}")
        samples = backend.sample_group(prompt, int(rng.integers(2, 6)))
        problem = Problem(f"g{j}", f"p{j}", "a")
        for s, r in zip(samples, _mixed_rewards(rng, len(samples))):
            s.problem, s.reward = problem, r
        groups.append(RolloutGroup.from_samples(problem, Stage.DIRECT, samples))
    theta_old = backend.get_params()
    for _ in range(max_tries):
        backend.set_params(theta_old + rng.normal(0, 0.3, size=theta_old.shape))
        ratios = np.concatenate([np.exp(backend.score_tokens(s.prompt, s.tokens) - s.logprobs)
                                 for g in groups for s in g.samples])
        if np.all(np.abs(ratios - (1 + clip.eps_high)) > KINK_MARGIN) and \
                np.all(np.abs(ratios - (1 - clip.eps_low)) > KINK_MARGIN):
            break
    else:
        raise RuntimeError("could not place ratios away from the clip boundaries")
    pairs = []
    for _ in range(int(rng.integers(0, 4))):
        target = "".join(ALPHABET[int(i)] for i in rng.integers(0, vocab, size=length))
        pairs.append(("q", target))
    lam = float(rng.choice([0.0, 0.04, 0.5]))
    return GradcheckInstance(backend, groups, pairs, clip, lam)


def combined_handle(inst: GradcheckInstance) -> Callable:
    def fn(b):
        r = combined_loss(inst.groups, inst.pairs, b, inst.clip, inst.lam)
        return r.total, r.grad
    return fn


def dapo_handle(inst: GradcheckInstance) -> Callable:
    def fn(b):
        r = dapo_loss(inst.groups, b, inst.clip)
        return r.loss, r.grad
    return fn


def sft_handle(inst: GradcheckInstance) -> Callable:
    def fn(b):
        r = sft_loss(inst.pairs, b)
        return r.loss, r.grad
    return fn


LOSSES = {"combined": combined_handle, "dapo": dapo_handle, "sft": sft_handle}


def run_suite(kind: str = "combined", instances: int = 50, seed: int = 0, step: float = 1e-5) -> list[float]:
    """Max relative error per randomized instance."""
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}; choose from {', '.join(LOSSES)}")
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        inst = random_instance(rng)
        errors.append(finite_diff_check(LOSSES[kind](inst), inst.backend, step))
    return errors
