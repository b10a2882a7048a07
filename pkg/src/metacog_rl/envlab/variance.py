"""Monte Carlo estimates of policy-gradient variance for the three rollout stages.

Each episode is a modular chain task. The policy emits one value token per
operation and earns per-step reward 1 when that token equals the true
intermediate value. The estimator for one episode is
``g = sum_t grad log pi(a_t | ctx_t) * G_t`` with ``G_t`` the undiscounted
reward-to-go, and the reported variance is the trace of its covariance.

* direct: the full horizon H from the true start value.
* decomposition: each of the k sub-problems of horizon H' = H/k, started
  from its true input value; the variance is averaged over sub-problems.
* reflection: a direct attempt is drawn first; the window of H'' steps
  beginning at its first wrong step is resampled with the correct prefix
  fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from metacog_rl.envlab.tasks import ChainTaskSpec, TaskSpecError
from metacog_rl.policy.softmax import SoftmaxSequencePolicy
from metacog_rl.types import STAGES, Stage

MIN_ROLLOUTS = 1000
Z95 = 1.959963984540054
_CHUNK = 8192

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def step_correct(actions: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return (actions == truth).astype(np.float64)


@dataclass
class _Episodes:
    """Vectorized batch of chain tasks: cues and true values, start value first."""

    cues: np.ndarray  # (n, H)
    values: np.ndarray  # (n, H + 1)


def _draw_episodes(spec: ChainTaskSpec, n: int, rng: np.random.Generator) -> _Episodes:
    m = spec.modulus
    start = rng.integers(spec.operand_min, spec.operand_max + 1, size=n)
    ops = rng.integers(0, len(spec.operations), size=(n, spec.horizon))
    xs = rng.integers(spec.operand_min, spec.operand_max + 1, size=(n, spec.horizon))
    values = np.empty((n, spec.horizon + 1), dtype=np.int64)
    values[:, 0] = start % m
    for t in range(spec.horizon):
        prev, x, op = values[:, t], xs[:, t], ops[:, t]
        out = np.zeros(n, dtype=np.int64)
        for code, name in enumerate(spec.operations):
            sel = op == code
            if name == "add":
                out[sel] = prev[sel] + x[sel]
            elif name == "sub":
                out[sel] = prev[sel] - x[sel]
            else:
                out[sel] = prev[sel] * x[sel]
        values[:, t + 1] = out % m
    cues = ops * spec.n_operands + (xs - spec.operand_min)
    return _Episodes(cues.astype(np.int64), values)


def _rollout(policy: SoftmaxSequencePolicy, cues: np.ndarray, first_prev: np.ndarray,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample one token per cue for every row; returns actions and context rows."""
    probs = policy.prob_table()
    n, h = cues.shape
    actions = np.empty((n, h), dtype=np.int64)
    ctx = np.empty((n, h), dtype=np.int64)
    prev = first_prev.astype(np.int64)
    for t in range(h):
        c = policy.context_index(cues[:, t], prev)
        cdf = np.cumsum(probs[c], axis=1)
        u = rng.random(n) * cdf[:, -1]
        a = np.argmax(cdf > u[:, None], axis=1)
        actions[:, t] = a
        ctx[:, t] = c
        prev = a
    return actions, ctx


@dataclass
class _Block:
    """Sparse per-episode gradients: context rows, actions, reward-to-go."""

    ctx: np.ndarray
    actions: np.ndarray
    returns: np.ndarray


def _block(policy, cues, first_prev, truth, rng, reward_fn: RewardFn) -> _Block:
    actions, ctx = _rollout(policy, cues, first_prev, rng)
    r = np.asarray(reward_fn(actions, truth), dtype=np.float64)
    if r.shape != actions.shape:
        raise ValueError(f"reward_fn returned shape {r.shape}, expected {actions.shape}")
    if np.any(r < 0) or np.any(r > 1):
        raise ValueError("per-step rewards must lie in [0, 1]")
    returns = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
    return _Block(ctx, actions, returns)


def _dense(policy: SoftmaxSequencePolicy, blk: _Block, lo: int, hi: int) -> np.ndarray:
    """Rows ``lo:hi`` of the per-episode gradient matrix, flattened per episode."""
    probs = policy.prob_table()
    V = policy.vocab_size
    P = policy.num_params
    c = hi - lo
    ctx, act, G = blk.ctx[lo:hi], blk.actions[lo:hi], blk.returns[lo:hi]
    rows = (np.arange(c) * P)[:, None]
    hit = (rows + ctx * V + act).ravel()
    spread = ((rows + ctx * V)[:, :, None] + np.arange(V)).ravel()
    out = np.bincount(hit, weights=G.ravel(), minlength=c * P)
    out -= np.bincount(spread, weights=(G[:, :, None] * probs[ctx]).ravel(), minlength=c * P)
    return out.reshape(c, P)


def _sq_dev(policy, blk: _Block) -> np.ndarray:
    """Per-episode squared distance of the gradient from the batch mean (two passes)."""
    n = blk.ctx.shape[0]
    total = np.zeros(policy.num_params)
    for lo in range(0, n, _CHUNK):
        total += _dense(policy, blk, lo, min(n, lo + _CHUNK)).sum(axis=0)
    mean = total / n
    out = np.empty(n)
    for lo in range(0, n, _CHUNK):
        d = _dense(policy, blk, lo, min(n, lo + _CHUNK)) - mean
        out[lo : lo + d.shape[0]] = np.einsum("ij,ij->i", d, d)
    return out


def _check_policy(spec: ChainTaskSpec, policy: SoftmaxSequencePolicy) -> None:
    if spec.modulus is None:
        raise TaskSpecError("the variance lab needs a modular chain spec (per-step actions are value tokens)")
    n_cues = len(spec.operations) * spec.n_operands
    if policy.vocab_size != spec.modulus or policy.n_cues != n_cues:
        raise TaskSpecError(
            f"policy (vocab {policy.vocab_size}, cues {policy.n_cues}) cannot act on this spec "
            f"(needs vocab {spec.modulus}, cues {n_cues})"
        )


def stage_blocks(stage: Stage, spec: ChainTaskSpec, policy: SoftmaxSequencePolicy, rollouts: int,
                 seed: int = 0, reward_fn: RewardFn = step_correct) -> list[_Block]:
    """Sample the stage's episodes, one block per sub-problem position."""
    _check_policy(spec, policy)
    stage = Stage(stage)
    task_rng = np.random.default_rng([seed, 0])
    act_rng = np.random.default_rng([seed, 1])
    ep = _draw_episodes(spec, rollouts, task_rng)
    H, v = spec.horizon, ep.values
    if stage is Stage.DIRECT:
        return [_block(policy, ep.cues, v[:, 0], v[:, 1:], act_rng, reward_fn)]
    if stage is Stage.DECOMPOSITION:
        h = spec.sub_horizon
        return [
            _block(policy, ep.cues[:, j * h : (j + 1) * h], v[:, j * h], v[:, j * h + 1 : (j + 1) * h + 1],
                   act_rng, reward_fn)
            for j in range(spec.sub_count)
        ]
    h = spec.reflect_horizon
    attempt, _ = _rollout(policy, ep.cues, v[:, 0], act_rng)
    wrong = attempt != v[:, 1:]
    first = np.where(wrong.any(axis=1), wrong.argmax(axis=1), H - h)
    s = np.minimum(first, H - h)
    idx = s[:, None] + np.arange(h)
    rows = np.arange(rollouts)[:, None]
    return [_block(policy, ep.cues[rows, idx], v[np.arange(rollouts), s], v[rows, idx + 1], act_rng, reward_fn)]


def stage_horizon(stage: Stage, spec: ChainTaskSpec) -> int:
    return {Stage.DIRECT: spec.horizon, Stage.DECOMPOSITION: spec.sub_horizon,
            Stage.REFLECTION: spec.reflect_horizon}[Stage(stage)]


def estimate_gradient_variance(stage: Stage, spec: ChainTaskSpec, policy: SoftmaxSequencePolicy,
                               rollouts: int, seed: int = 0,
                               reward_fn: RewardFn = step_correct) -> tuple[float, float]:
    """Trace-of-covariance estimate of the stage's gradient and its 95% halfwidth."""
    if rollouts < MIN_ROLLOUTS:
        raise ValueError(f"rollouts must be at least {MIN_ROLLOUTS}, got {rollouts}")
    blocks = stage_blocks(stage, spec, policy, rollouts, seed, reward_fn)
    d = np.mean([_sq_dev(policy, b) for b in blocks], axis=0)
    variance = float(d.sum() / (rollouts - 1))
    halfwidth = float(Z95 * d.std(ddof=1) / math.sqrt(rollouts))
    return variance, halfwidth


@dataclass
class StageEstimate:
    variance: float
    halfwidth: float
    rollouts: int
    horizon: int

    @property
    def interval(self) -> tuple[float, float]:
        return self.variance - self.halfwidth, self.variance + self.halfwidth


@dataclass
class VarianceReport:
    spec: ChainTaskSpec
    estimates: dict[Stage, StageEstimate]
    seed: int
    steps_to_threshold: dict[Stage, Optional[int]] = field(default_factory=dict)

    @property
    def dec_below_direct(self) -> bool:
        """Var(DecR) < Var(DR) with disjoint 95% intervals."""
        return self.estimates[Stage.DECOMPOSITION].interval[1] < self.estimates[Stage.DIRECT].interval[0]

    @property
    def ref_within_dec(self) -> bool:
        return self.estimates[Stage.REFLECTION].variance <= self.estimates[Stage.DECOMPOSITION].variance

    @property
    def ordering_satisfied(self) -> bool:
        return self.dec_below_direct and self.ref_within_dec

    @property
    def ref_dec_ratio(self) -> Optional[float]:
        dec = self.estimates[Stage.DECOMPOSITION].variance
        return None if dec == 0 else self.estimates[Stage.REFLECTION].variance / dec

    def to_record(self) -> dict:
        return {
            "type": "variance_report",
            "schema_version": 1,
            "horizon": self.spec.horizon,
            "sub_count": self.spec.sub_count,
            "gamma": self.spec.gamma,
            "modulus": self.spec.modulus,
            "seed": self.seed,
            "stages": {
                s.value: {"variance": e.variance, "halfwidth": e.halfwidth, "rollouts": e.rollouts,
                          "horizon": e.horizon,
                          **({"steps_to_threshold": self.steps_to_threshold[s]}
                             if s in self.steps_to_threshold else {})}
                for s, e in self.estimates.items()
            },
            "dec_below_direct": self.dec_below_direct,
            "ref_within_dec": self.ref_within_dec,
            "ordering_satisfied": self.ordering_satisfied,
            "ref_dec_ratio": self.ref_dec_ratio,
        }


def check_ordering(spec: ChainTaskSpec, policy: SoftmaxSequencePolicy, rollouts: int, seed: int = 0,
                   reward_fn: RewardFn = step_correct) -> VarianceReport:
    """All three stages with the same seed, hence the same task draws."""
    estimates = {}
    for stage in STAGES:
        var, hw = estimate_gradient_variance(stage, spec, policy, rollouts, seed, reward_fn)
        estimates[stage] = StageEstimate(var, hw, rollouts, stage_horizon(stage, spec))
    return VarianceReport(spec, estimates, seed)


def mean_gradient(policy: SoftmaxSequencePolicy, blocks: list[_Block]) -> np.ndarray:
    """Batch mean of the per-episode estimator, summed over blocks."""
    grad = np.zeros(policy.num_params)
    for blk in blocks:
        n = blk.ctx.shape[0]
        for lo in range(0, n, _CHUNK):
            grad += _dense(policy, blk, lo, min(n, lo + _CHUNK)).sum(axis=0)
    return grad / blocks[0].ctx.shape[0]


def direct_step_accuracy(spec: ChainTaskSpec, policy: SoftmaxSequencePolicy, episodes: int, seed: int) -> float:
    """Mean per-step correctness of full-horizon attempts."""
    rng = np.random.default_rng([seed, 2])
    ep = _draw_episodes(spec, episodes, rng)
    actions, _ = _rollout(policy, ep.cues, ep.values[:, 0], rng)
    return float(np.mean(actions == ep.values[:, 1:]))


def steps_to_threshold(stage: Stage, spec: ChainTaskSpec, policy: SoftmaxSequencePolicy, threshold: float,
                       learning_rate: float = 1.0, batch: int = 256, max_steps: int = 500,
                       eval_episodes: int = 2000, seed: int = 0) -> Optional[int]:
    """Gradient-ascent steps with the stage's estimator until full-horizon per-step accuracy reaches ``threshold``.

    Works on a copy of ``policy``; None when the budget runs out.
    """
    work = SoftmaxSequencePolicy(policy.vocab_size, policy.context_order, policy.n_cues, policy.params.copy())
    for step in range(max_steps + 1):
        if direct_step_accuracy(spec, work, eval_episodes, seed) >= threshold:
            return step
        if step == max_steps:
            break
        blocks = stage_blocks(stage, spec, work, batch, seed=seed * 100003 + step)
        work.params = work.params + learning_rate * mean_gradient(work, blocks).reshape(work.params.shape)
    return None
