"""Group-normalized advantages, the clip-higher token-level loss, SFT mixing, and gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from metacog_rl.types import CompletionSample, Problem, Stage
from metacog_rl.verify import group_accuracy

DEFAULT_LAMBDA = 0.04


class DegenerateGroupError(ValueError):
    """A group with zero reward variance reached the objective."""


class TokenCountMismatchError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.20
    eps_high: float = 0.28

    def __post_init__(self):
        if not 0.0 < self.eps_low <= self.eps_high < 1.0:
            raise ValueError(
                f"clip: need 0 < eps_low <= eps_high < 1, got eps_low={self.eps_low}, eps_high={self.eps_high}"
            )


def normalize_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / population std; all-equal rewards are rejected."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise DegenerateGroupError("empty reward group")
    std = r.std()
    if np.all(r == r[0]) or std == 0.0:
        raise DegenerateGroupError("all rewards in the group are equal; the accuracy filter should drop it")
    return (r - r.mean()) / std


@dataclass
class RolloutGroup:
    problem: Problem
    stage: Stage
    samples: list[CompletionSample]
    rewards: list[int] = field(default_factory=list)
    accuracy: float = 0.0
    advantages: Optional[np.ndarray] = None

    @classmethod
    def from_samples(cls, problem: Problem, stage: Stage, samples: list[CompletionSample]) -> "RolloutGroup":
        rewards = [s.reward for s in samples]
        acc = group_accuracy(rewards)
        adv = normalize_advantages(rewards) if 0.0 < acc < 1.0 else None
        return cls(problem, stage, samples, rewards, acc, adv)

    @property
    def is_mixed(self) -> bool:
        return 0.0 < self.accuracy < 1.0


def clipped_terms(ratio: np.ndarray, advantage: np.ndarray, clip: ClipConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-token ``min(r*A, clip(r)*A)`` and the mask where the unclipped branch carries gradient."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.broadcast_to(np.asarray(advantage, dtype=np.float64), ratio.shape)
    clipped = np.clip(ratio, 1.0 - clip.eps_low, 1.0 + clip.eps_high)
    terms = np.minimum(ratio * advantage, clipped * advantage)
    binding = ((advantage > 0) & (ratio > 1.0 + clip.eps_high)) | ((advantage < 0) & (ratio < 1.0 - clip.eps_low))
    return terms, ~binding


@dataclass
class LossResult:
    loss: float
    grad: Optional[np.ndarray]


def _check_tokens(sample: CompletionSample, new: np.ndarray) -> None:
    if sample.tokens is None or sample.logprobs is None:
        raise TokenCountMismatchError("sample carries no tokens or stored log-probabilities")
    if len(new) != len(sample.logprobs) or len(new) != len(sample.tokens):
        raise TokenCountMismatchError(
            f"stored {len(sample.logprobs)} old log-probs but scored {len(new)} tokens"
        )


def dapo_loss(groups: Sequence[RolloutGroup], backend, clip: ClipConfig = ClipConfig(),
              with_grad: bool = True) -> LossResult:
    """Token-mean clipped surrogate over every sample of every group, negated."""
    total_tokens = sum(s.num_tokens for g in groups for s in g.samples)
    grad = np.zeros(backend.num_params) if with_grad else None
    if total_tokens == 0:
        return LossResult(0.0, grad)
    acc = 0.0
    for g in groups:
        if g.advantages is None:
            raise DegenerateGroupError(f"group for {g.problem.id} has accuracy {g.accuracy}")
        for sample, adv in zip(g.samples, g.advantages):
            if sample.num_tokens == 0:
                continue
            new = backend.score_tokens(sample.prompt, sample.tokens)
            _check_tokens(sample, new)
            ratio = np.exp(new - sample.logprobs)
            terms, active = clipped_terms(ratio, adv, clip)
            acc += float(terms.sum())
            if with_grad:
                # d(min term)/d(new logp) = r*A on the active branch, 0 where the clip binds
                weights = np.where(active, -ratio * adv / total_tokens, 0.0)
                grad += backend.logprob_grad(sample.prompt, sample.tokens, weights)
    return LossResult(-acc / total_tokens, grad)


def sft_loss(pairs: Sequence[tuple[str, str]], backend, with_grad: bool = True) -> LossResult:
    """Per-token NLL of each target under its prompt, averaged over pairs."""
    grad = np.zeros(backend.num_params) if with_grad else None
    if not pairs:
        return LossResult(0.0, grad)
    total = 0.0
    n = len(pairs)
    for prompt, target in pairs:
        tokens = backend.encode(prompt, target)
        if not tokens:
            continue
        logp = backend.score_tokens(prompt, tokens)
        total += -float(logp.mean())
        if with_grad:
            grad += backend.logprob_grad(prompt, tokens, np.full(len(tokens), -1.0 / (len(tokens) * n)))
    return LossResult(total / n, grad)


@dataclass
class CombinedLoss:
    dapo: float
    sft: float
    total: float
    grad: Optional[np.ndarray]


def combined_loss(groups: Sequence[RolloutGroup], pairs: Sequence[tuple[str, str]], backend,
                  clip: ClipConfig = ClipConfig(), lam: float = DEFAULT_LAMBDA,
                  with_grad: bool = True) -> CombinedLoss:
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    d = dapo_loss(groups, backend, clip, with_grad)
    s = sft_loss(pairs, backend, with_grad) if pairs else LossResult(0.0, np.zeros_like(d.grad) if with_grad else None)
    grad = d.grad + lam * s.grad if with_grad else None
    return CombinedLoss(d.loss, s.loss, d.loss + lam * s.loss, grad)


def finite_diff_gradient(loss_fn: Callable[[], float], backend, step: float) -> np.ndarray:
    theta = backend.get_params()
    numeric = np.empty_like(theta)
    try:
        for j in range(theta.size):
            x = theta.copy()
            x[j] = theta[j] + step
            backend.set_params(x)
            f_plus = loss_fn()
            x[j] = theta[j] - step
            backend.set_params(x)
            f_minus = loss_fn()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientCheckError(f"non-finite loss when perturbing parameter {j}")
            numeric[j] = (f_plus - f_minus) / (2.0 * step)
    finally:
        backend.set_params(theta)
    return numeric


def finite_diff_check(loss_fn: Callable[[object], tuple[float, np.ndarray]], backend, step: float = 1e-5) -> float:
    """Max over parameters of |analytic - central difference| / max(1, |numeric|).

    ``loss_fn(backend)`` returns ``(loss, analytic_grad)`` at the backend's
    current parameters.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    if not (backend.capabilities.can_score and backend.capabilities.can_update):
        raise GradientCheckError("finite-difference checks need a scoring, updatable backend")
    _, analytic = loss_fn(backend)
    numeric = finite_diff_gradient(lambda: loss_fn(backend)[0], backend, step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))
