"""Three-stage rollout cascade, dynamic-sampling fill, and the training loop."""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from metacog_rl.metabuffer import EmptyBufferError, MetacogBuffer, MetacogEntry
from metacog_rl.objective import DEFAULT_LAMBDA, ClipConfig, DegenerateGroupError, RolloutGroup, combined_loss
from metacog_rl.policy.base import PolicyBackend
from metacog_rl.templates import (
    SEED_DEMO,
    StructuredSolution,
    TemplateSet,
    builtin_templates,
    parse_structured,
    rewrite_to_direct,
)
from metacog_rl.types import STAGES, Problem, Stage
from metacog_rl.verify import AnswerKey, judge

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    METACOG = "metacog"
    DAPO_ONLY = "dapo-only"


class ProvenanceError(AssertionError):
    """A problem reached a stage it was not routed to."""


@dataclass(frozen=True)
class StepConfig:
    prompts_per_step: int = 128
    group_size: int = 64
    target_groups: int = 128
    mu: int = 1
    mode: Mode = Mode.METACOG
    strict_fill: bool = False
    max_fill_rounds: int = 8
    use_metabuffer: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("prompts_per_step", "group_size", "target_groups", "mu", "max_fill_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class ObjectiveConfig:
    clip: ClipConfig = ClipConfig()
    lam: float = DEFAULT_LAMBDA
    learning_rate: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam: must be nonnegative, got {self.lam}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate: must be nonnegative, got {self.learning_rate}")


class DynamicSamplingBuffer:
    """Training groups for one step; every member has 0 < accuracy < 1."""

    def __init__(self, target_size: int):
        self.target_size = target_size
        self.groups: list[RolloutGroup] = []

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def full(self) -> bool:
        return len(self.groups) >= self.target_size

    def add(self, group: RolloutGroup) -> bool:
        if not group.is_mixed:
            raise DegenerateGroupError(
                f"group for {group.problem.id} with accuracy {group.accuracy} cannot enter training"
            )
        if self.full:
            return False
        self.groups.append(group)
        return True

    def stage_counts(self) -> Counter:
        return Counter(g.stage for g in self.groups)


@dataclass
class StageResult:
    stage: Stage
    groups: list[RolloutGroup]
    zero: list[tuple[Problem, StructuredSolution]]
    full: list[RolloutGroup]
    inserted: int = 0

    @property
    def generated(self) -> int:
        return len(self.groups) + len(self.zero) + len(self.full)

    @property
    def correct_samples(self) -> int:
        n = sum(g.rewards.count(1) for g in self.groups) + sum(g.rewards.count(1) for g in self.full)
        return n


def _best_failed(group: RolloutGroup) -> StructuredSolution:
    """Failed sample with the most parsed steps; first sampled wins ties."""
    best = None
    for s in group.samples:
        if s.reward == 1:
            continue
        parsed = s.structured or parse_structured(s.text)
        if best is None or len(parsed.steps) > len(best.steps):
            best = parsed
    return best


def run_stage(
    stage: Stage,
    problems: Sequence[Problem],
    backend: PolicyBackend,
    metabuffer: Optional[MetacogBuffer],
    group_size: int,
    priors: Optional[dict[str, StructuredSolution]] = None,
    templates: Optional[TemplateSet] = None,
) -> StageResult:
    """Render, sample, score and partition one stage; decomposition feeds the metabuffer."""
    stage = Stage(stage)
    templates = templates or builtin_templates()
    prompts = []
    for p in problems:
        if stage is Stage.DECOMPOSITION:
            try:
                demo = metabuffer.retrieve_best(p.text) if metabuffer is not None else SEED_DEMO
            except EmptyBufferError:
                demo = SEED_DEMO
            prompts.append(templates.render(stage, p.text, demo=demo))
        elif stage is Stage.REFLECTION:
            if priors is None or p.id not in priors:
                raise ProvenanceError(f"problem {p.id} has no prior attempt for reflection")
            prompts.append(templates.render(stage, p.text, prior=priors[p.id]))
        else:
            prompts.append(templates.render(stage, p.text))

    batches = backend.sample_groups(prompts, group_size) if prompts else []
    result = StageResult(stage, [], [], [])
    pending: list[MetacogEntry] = []
    for p, samples in zip(problems, batches):
        key = AnswerKey.from_raw(p.answer)
        for s in samples:
            if s.stage is not stage:
                raise ProvenanceError(f"backend tagged a {s.stage.value} sample during the {stage.value} stage")
            s.problem = p
            verdict = judge(key, s.text)
            s.extracted = verdict.extracted
            s.reward = -1 if s.failed else verdict.reward
            s.structured = parse_structured(s.text)
            if stage is Stage.DECOMPOSITION and s.reward == 1 and s.structured.steps:
                pending.append(MetacogEntry(p.text, s.structured.steps, s.structured.final_answer or ""))
        group = RolloutGroup.from_samples(p, stage, samples)
        if group.accuracy == 0.0:
            result.zero.append((p, _best_failed(group)))
        elif group.accuracy == 1.0:
            result.full.append(group)
        else:
            result.groups.append(group)
    if metabuffer is not None:
        # inserts are serialized at the stage boundary, after every retrieval
        for entry in pending:
            result.inserted += metabuffer.insert_if_correct(entry, 1)
    return result


@dataclass
class FillResult:
    buffer: DynamicSamplingBuffer
    stages: list[StageResult]
    rounds: int
    provenance: dict[str, list[Stage]] = field(default_factory=dict)

    def stage_calls(self) -> Counter:
        return Counter(r.stage for r in self.stages)


def _fill_round(problems, backend, metabuffer, cfg: StepConfig, buffer, templates, provenance, stages):
    direct = run_stage(Stage.DIRECT, problems, backend, metabuffer, cfg.group_size, templates=templates)
    stages.append(direct)
    for p in problems:
        provenance.setdefault(p.id, []).append(Stage.DIRECT)
    for g in direct.groups:
        buffer.add(g)
    if cfg.mode is Mode.DAPO_ONLY or buffer.full or not direct.zero:
        return
    zero = [p for p, _ in direct.zero]
    dec = run_stage(Stage.DECOMPOSITION, zero, backend, metabuffer if cfg.use_metabuffer else None,
                    cfg.group_size, templates=templates)
    stages.append(dec)
    for p in zero:
        provenance[p.id].append(Stage.DECOMPOSITION)
    for g in dec.groups:
        buffer.add(g)
    if buffer.full or not dec.zero:
        return
    priors = {p.id: prior for p, prior in dec.zero}
    residue = [p for p, _ in dec.zero]
    ref = run_stage(Stage.REFLECTION, residue, backend, metabuffer, cfg.group_size, priors=priors,
                    templates=templates)
    stages.append(ref)
    for p in residue:
        provenance[p.id].append(Stage.REFLECTION)
    for g in ref.groups:
        buffer.add(g)


def fill_batch(
    problems: Sequence[Problem],
    backend: PolicyBackend,
    metabuffer: Optional[MetacogBuffer],
    cfg: StepConfig,
    templates: Optional[TemplateSet] = None,
    more_problems: Optional[Callable[[], Sequence[Problem]]] = None,
) -> FillResult:
    """Direct on every problem, then the extra stages on the zero-accuracy residue.

    With ``strict_fill`` further prompt batches come from ``more_problems``
    until the buffer holds ``target_groups`` or ``max_fill_rounds`` is spent.
    """
    buffer = DynamicSamplingBuffer(cfg.target_groups)
    stages: list[StageResult] = []
    provenance: dict[str, list[Stage]] = {}
    rounds = 0
    batch = list(problems)
    while True:
        rounds += 1
        _fill_round(batch, backend, metabuffer, cfg, buffer, templates, provenance, stages)
        if buffer.full or not cfg.strict_fill or more_problems is None or rounds >= cfg.max_fill_rounds:
            break
        batch = list(more_problems())
        if not batch:
            break
    check_provenance(stages)
    return FillResult(buffer, stages, rounds, provenance)


def check_provenance(stages: Sequence[StageResult]) -> None:
    """Decomposition only after zero Direct accuracy; Reflection only after zero Decomposition accuracy."""
    zero_after: dict[Stage, set[str]] = {s: set() for s in STAGES}
    for r in stages:
        ids = [g.problem.id for g in r.groups + r.full] + [p.id for p, _ in r.zero]
        if r.stage is Stage.DECOMPOSITION:
            bad = set(ids) - zero_after[Stage.DIRECT]
        elif r.stage is Stage.REFLECTION:
            bad = set(ids) - zero_after[Stage.DECOMPOSITION]
        else:
            bad = set()
        if bad:
            raise ProvenanceError(f"{r.stage.value} stage ran on unrouted problems: {sorted(bad)}")
        zero_after[r.stage] |= {p.id for p, _ in r.zero}


def sft_pairs(buffer: DynamicSamplingBuffer, templates: Optional[TemplateSet] = None) -> list[tuple[str, str]]:
    """Correct metacognitive samples in the training buffer, rewritten to the direct template."""
    pairs = []
    for g in buffer.groups:
        if not g.stage.is_metacognitive:
            continue
        for s in g.samples:
            if s.reward == 1:
                pairs.append(rewrite_to_direct(s, templates))
    return pairs


@dataclass
class StepReport:
    step: int
    skip: bool
    generated_groups: dict[str, int]
    valid_groups: dict[str, int]
    correct_samples: dict[str, int]
    occupancy: int
    fill_rounds: int
    metabuffer_size: int
    sft_pairs: int = 0
    dapo_losses: list[float] = field(default_factory=list)
    sft_losses: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    eval_accuracy: Optional[float] = None

    @property
    def total_valid(self) -> int:
        return self.occupancy


def _stage_counter(fill: FillResult, attr: Callable[[StageResult], int]) -> dict[str, int]:
    out = {s.value: 0 for s in STAGES}
    for r in fill.stages:
        out[r.stage.value] += attr(r)
    return out


def train_step(
    fill: FillResult,
    backend: PolicyBackend,
    cfg: StepConfig,
    obj: ObjectiveConfig,
    metabuffer: Optional[MetacogBuffer],
    step: int = 0,
    templates: Optional[TemplateSet] = None,
    pair_hook: Optional[Callable[[list[tuple[str, str]]], None]] = None,
    update: bool = True,
) -> StepReport:
    """Up to ``mu`` combined-loss updates on the filled buffer; an empty buffer reports a skip.

    Backends that cannot update (or ``update=False``) run the rollout bookkeeping only.
    """
    buffer = fill.buffer
    report = StepReport(
        step=step,
        skip=len(buffer) == 0,
        generated_groups=_stage_counter(fill, lambda r: r.generated),
        valid_groups={s.value: buffer.stage_counts().get(s, 0) for s in STAGES},
        correct_samples=_stage_counter(fill, lambda r: r.correct_samples),
        occupancy=len(buffer),
        fill_rounds=fill.rounds,
        metabuffer_size=len(metabuffer) if metabuffer is not None else 0,
    )
    if report.skip:
        return report
    for g in buffer.groups:
        if not g.is_mixed or g.advantages is None:
            raise DegenerateGroupError(f"degenerate group for {g.problem.id} (accuracy {g.accuracy})")
    pairs = sft_pairs(buffer, templates)
    report.sft_pairs = len(pairs)
    if pair_hook is not None:
        pair_hook(pairs)
    if not (update and backend.capabilities.can_update):
        return report
    # the old log-probs stored at sampling time stay fixed across all mu iterations
    for _ in range(cfg.mu):
        res = combined_loss(buffer.groups, pairs, backend, obj.clip, obj.lam)
        report.dapo_losses.append(res.dapo)
        report.sft_losses.append(res.sft)
        report.losses.append(res.total)
        backend.apply_gradient(res.grad, obj.learning_rate)
    return report


class ProblemSampler:
    """Without replacement inside a step, with replacement across steps."""

    def __init__(self, dataset: Sequence[Problem], seed: int):
        if not dataset:
            raise ValueError("dataset is empty")
        self.dataset = list(dataset)
        self.rng = np.random.default_rng([seed, 7])
        self._unused: list[int] = []

    def start_step(self) -> None:
        self._unused = list(self.rng.permutation(len(self.dataset)))

    def draw(self, n: int) -> list[Problem]:
        take, self._unused = self._unused[:n], self._unused[n:]
        return [self.dataset[i] for i in take]


def train_loop(
    dataset: Sequence[Problem],
    backend: PolicyBackend,
    cfg: StepConfig,
    obj: ObjectiveConfig,
    steps: int,
    seed: int = 0,
    metabuffer: Optional[MetacogBuffer] = None,
    templates: Optional[TemplateSet] = None,
    evaluate: Optional[Callable[[PolicyBackend], float]] = None,
    eval_every: int = 1,
    on_step: Optional[Callable[[StepReport], None]] = None,
    pair_hook: Optional[Callable[[list[tuple[str, str]]], None]] = None,
    on_fill: Optional[Callable[[int, FillResult], None]] = None,
    update: bool = True,
) -> list[StepReport]:
    """Run ``steps`` iterations of sample, fill, update; returns one report per step."""
    sampler = ProblemSampler(dataset, seed)
    reports = []
    for step in range(1, steps + 1):
        backend.begin_step(step)
        sampler.start_step()
        problems = sampler.draw(cfg.prompts_per_step)
        fill = fill_batch(problems, backend, metabuffer, cfg, templates,
                          more_problems=lambda: sampler.draw(cfg.prompts_per_step))
        if on_fill is not None:
            on_fill(step, fill)
        report = train_step(fill, backend, cfg, obj, metabuffer, step, templates, pair_hook, update)
        if evaluate is not None and (step % eval_every == 0 or step == steps):
            report.eval_accuracy = float(evaluate(backend))
        if report.skip:
            logger.info("step %d: no valid groups, skipped", step)
        reports.append(report)
        if on_step is not None:
            on_step(report)
    return reports
