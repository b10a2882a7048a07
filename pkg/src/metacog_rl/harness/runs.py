"""Assemble datasets, backends and evaluators from a RunConfig and execute runs."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from metacog_rl.envlab.codec import ChainCodec
from metacog_rl.envlab.evaluation import expected_accuracy
from metacog_rl.envlab.tasks import generate_tasks
from metacog_rl.harness import plotting
from metacog_rl.harness.config import ConfigError, RunConfig
from metacog_rl.harness.metrics import MetricsWriter, ReportStream
from metacog_rl.metabuffer import MetacogBuffer
from metacog_rl.policy.base import PolicyBackend
from metacog_rl.policy.remote import RemoteBackend, RemoteBackendConfig
from metacog_rl.policy.scripted import ScriptedPolicy
from metacog_rl.policy.softmax import SoftmaxBackend, SoftmaxSequencePolicy
from metacog_rl.rollout import FillResult, StepReport, train_loop
from metacog_rl.templates import TemplateSet, builtin_templates
from metacog_rl.types import Problem, Stage

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    train: list[Problem]
    heldout: list[Problem]


def load_jsonl_problems(path: str | Path, prefix: str) -> list[Problem]:
    """Records with ``problem`` and ``answer`` (``id`` and ``difficulty`` optional)."""
    problems = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(rec, dict) or "problem" not in rec or "answer" not in rec:
            raise DatasetError(f"{path}:{lineno}: record needs 'problem' and 'answer'")
        problems.append(Problem(id=str(rec.get("id", f"{prefix}-{lineno}")), text=str(rec["problem"]),
                                answer=str(rec["answer"]), difficulty=str(rec.get("difficulty", "default"))))
    if not problems:
        raise DatasetError(f"{path}: no problems")
    return problems


def _label(problems: list[Problem], fraction: float, rng: np.random.Generator) -> list[Problem]:
    hard = rng.random(len(problems)) < fraction
    return [dataclasses.replace(p, difficulty="hard" if h else "easy") for p, h in zip(problems, hard)]


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "jsonl":
        train = load_jsonl_problems(cfg.dataset_path, "train")
        heldout = load_jsonl_problems(cfg.heldout_path, "heldout") if cfg.heldout_path else []
        return Dataset(train, heldout)
    spec = cfg.chain_spec()
    rng = np.random.default_rng([cfg.seed, 3])
    train = _label([t.problem for t in generate_tasks(spec, cfg.train_size, "train", 0)], cfg.hard_fraction, rng)
    heldout = _label([t.problem for t in generate_tasks(spec, cfg.heldout_size, "heldout", 1)],
                     cfg.hard_fraction, rng)
    return Dataset(train, heldout)


def build_backend(cfg: RunConfig, data: Dataset) -> PolicyBackend:
    if cfg.backend == "softmax":
        if cfg.dataset != "chain":
            raise ConfigError("backend", "the softmax backend acts on synthetic chain datasets only")
        codec = ChainCodec(cfg.chain_spec())
        policy = SoftmaxSequencePolicy(codec.vocab_size, cfg.context_order, codec.n_cues, rng_seed=cfg.seed)
        return SoftmaxBackend(policy, codec)
    if cfg.backend == "scripted":
        everything = data.train + data.heldout
        return ScriptedPolicy(
            success={Stage.DIRECT: cfg.direct_success_easy, Stage.DECOMPOSITION: cfg.decomposition_success,
                     Stage.REFLECTION: cfg.reflection_success},
            answers={p.text: p.answer for p in everything},
            rng_seed=cfg.seed,
            difficulty={p.text: p.difficulty for p in everything},
            difficulty_success={"hard": {Stage.DIRECT: cfg.direct_success_hard}},
            direct_gain=cfg.direct_gain,
        )
    remote_cfg = RemoteBackendConfig(endpoint=cfg.endpoint, model=cfg.model, max_concurrency=cfg.max_concurrency,
                                     temperature=cfg.temperature, top_p=cfg.top_p, timeout=cfg.timeout,
                                     max_retries=cfg.max_retries, max_tokens=cfg.max_tokens)
    return RemoteBackend(remote_cfg)


def build_templates(cfg: RunConfig) -> TemplateSet:
    return TemplateSet.from_dir(cfg.templates_dir) if cfg.templates_dir else builtin_templates()


def build_evaluator(cfg: RunConfig, data: Dataset, templates: TemplateSet) -> Optional[Callable[[PolicyBackend], float]]:
    """Exact single-sample direct-template accuracy on the held-out problems, when computable."""
    if not data.heldout:
        return None
    if cfg.backend == "softmax":
        return lambda b: expected_accuracy(b, data.heldout, templates)
    if cfg.backend == "scripted":
        return lambda b: float(np.mean([b.probability(Stage.DIRECT, p.text) for p in data.heldout]))
    return None


@dataclass
class RunResult:
    cfg: RunConfig
    reports: list[StepReport]
    rows: list[dict]
    baseline_accuracy: Optional[float]
    metabuffer: MetacogBuffer
    backend: PolicyBackend
    files: list[Path] = field(default_factory=list)

    @property
    def final_accuracy(self) -> Optional[float]:
        accs = [r.eval_accuracy for r in self.reports if r.eval_accuracy is not None]
        return accs[-1] if accs else self.baseline_accuracy

    def steps_to_accuracy(self, threshold: float) -> Optional[int]:
        for r in self.reports:
            if r.eval_accuracy is not None and r.eval_accuracy >= threshold:
                return r.step
        return None


def _summary(result: RunResult) -> dict:
    return {
        "schema_version": 1,
        "mode": result.cfg.mode,
        "seed": result.cfg.seed,
        "steps": len(result.reports),
        "skipped_steps": sum(r.skip for r in result.reports),
        "baseline_accuracy": result.baseline_accuracy,
        "final_accuracy": result.final_accuracy,
        "cumulative_batches": result.rows[-1]["cumulative_batches"] if result.rows else 0,
        "metabuffer_size": len(result.metabuffer),
    }


def _batch_record(step: int, group) -> dict:
    return {
        "step": step,
        "problem_id": group.problem.id,
        "stage": group.stage.value,
        "accuracy": group.accuracy,
        "rewards": list(group.rewards),
        "advantages": None if group.advantages is None else [float(a) for a in group.advantages],
        "prompt": group.samples[0].prompt if group.samples else "",
        "completions": [s.text for s in group.samples],
    }


def execute(cfg: RunConfig, train: bool = True, write: bool = True,
            pair_hook=None, backend: Optional[PolicyBackend] = None) -> RunResult:
    """Run ``cfg.steps`` steps. ``train=False`` exports rollouts without updating.

    Output files (when ``write``): effective config, metrics, metabuffer
    snapshots, summary, policy parameters, rollout batches and figures.
    """
    if train and cfg.backend == "remote":
        raise ConfigError("backend", "the remote backend cannot be updated; use the rollout subcommand")
    out = Path(cfg.output_dir)
    writer = MetricsWriter(out) if write else None
    data = build_dataset(cfg)
    backend = backend or build_backend(cfg, data)
    templates = build_templates(cfg)
    evaluate = build_evaluator(cfg, data, templates)
    metabuffer = cfg.new_metabuffer()
    baseline = float(evaluate(backend)) if evaluate is not None else None

    batches_fh = open(out / "batches.jsonl", "w", encoding="utf-8") if write and not train else None
    files: list[Path] = []

    def on_fill(step: int, fill: FillResult) -> None:
        if batches_fh is not None:
            for g in fill.buffer.groups:
                batches_fh.write(json.dumps(_batch_record(step, g)) + "\n")

    stream = ReportStream(writer) if writer is not None else None
    snapshots: list[Path] = []

    def on_step(report: StepReport) -> None:
        if stream is not None:
            stream(report)
            if cfg.snapshot_every and report.step % cfg.snapshot_every == 0:
                path = out / f"metabuffer-step{report.step:05d}.jsonl"
                path.write_bytes(metabuffer.snapshot())
                snapshots.append(path)

    try:
        reports = train_loop(data.train, backend, cfg.step_config(), cfg.objective_config(), cfg.steps,
                             seed=cfg.seed, metabuffer=metabuffer, templates=templates,
                             evaluate=evaluate if train else None, eval_every=cfg.eval_every,
                             on_step=on_step, pair_hook=pair_hook, on_fill=on_fill, update=train)
    finally:
        if writer is not None:
            writer.close()
        if batches_fh is not None:
            batches_fh.close()
        if write:
            # the last good state survives an aborted run
            (out / "metabuffer.jsonl").write_bytes(metabuffer.snapshot())
            if isinstance(backend, SoftmaxBackend):
                np.save(out / "policy.npy", backend.policy.params)
    rows = stream.rows if stream is not None else []
    result = RunResult(cfg, reports, rows, baseline, metabuffer, backend)
    if write:
        cfg.write(out / "config.ini")
        (out / "summary.json").write_text(json.dumps(_summary(result), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        files = [out / "config.ini", out / "metrics.jsonl", out / "metrics.csv", out / "metabuffer.jsonl",
                 out / "summary.json", *snapshots]
        if batches_fh is not None:
            files.append(out / "batches.jsonl")
        if isinstance(backend, SoftmaxBackend):
            files.append(out / "policy.npy")
        if cfg.plots and rows:
            files += plotting.plot_run(rows, out, baseline)
    result.files = files
    return result
