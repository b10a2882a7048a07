"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from metacog_rl.envlab.tasks import ChainTaskSpec, TaskSpecError
from metacog_rl.envlab.variance import MIN_ROLLOUTS, check_ordering, steps_to_threshold
from metacog_rl.harness import gradcheck as gradcheck_mod
from metacog_rl.harness import plotting
from metacog_rl.harness.compare import compare_modes
from metacog_rl.harness.config import FIELDS, ConfigError, RunConfig, from_mapping, load_file
from metacog_rl.harness.metrics import MetricsPathError, MetricsWriter
from metacog_rl.harness.runs import DatasetError, execute
from metacog_rl.metabuffer import MetacogBuffer, MetacogEntry, SnapshotParseError
from metacog_rl.policy.softmax import SoftmaxSequencePolicy
from metacog_rl.types import STAGES

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    group = p.add_argument_group("config keys (see the [section] in parentheses)")
    for name, f in FIELDS.items():
        flags = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            flags.append(f"--{name}")
        group.add_argument(*flags, dest=name, default=argparse.SUPPRESS, metavar=f.type.upper(),
                           help=f"{f.metadata['help']} ({f.metadata['section']}; default {f.default!r})")


def _run_config(args: argparse.Namespace) -> RunConfig:
    base = load_file(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in FIELDS if hasattr(args, k)}
    return from_mapping(overrides, base)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    result = execute(cfg, train=True)
    _emit({"command": "train", "output_dir": cfg.output_dir, "steps": len(result.reports),
           "skipped_steps": sum(r.skip for r in result.reports), "baseline_accuracy": result.baseline_accuracy,
           "final_accuracy": result.final_accuracy, "files": [str(p) for p in result.files]})
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = _run_config(args)
    result = execute(cfg, train=False)
    _emit({"command": "rollout", "output_dir": cfg.output_dir, "steps": len(result.reports),
           "valid_groups": sum(r.occupancy for r in result.reports), "files": [str(p) for p in result.files]})
    return EXIT_OK


VARIANCE_COLUMNS = ("schema_version", "stage", "horizon", "rollouts", "variance", "halfwidth", "steps_to_threshold")


def cmd_variance(args) -> int:
    try:
        spec = ChainTaskSpec(horizon=args.horizon, sub_count=args.sub_count, gamma=args.gamma,
                             operand_min=args.operand_min, operand_max=args.operand_max,
                             operations=tuple(s for s in args.operations.split(",") if s), modulus=args.modulus,
                             seed=args.seed)
    except TaskSpecError as exc:
        raise ConfigError(str(exc).partition(":")[0].replace("_", "-"), str(exc).partition(": ")[2]) from None
    if args.rollouts < MIN_ROLLOUTS:
        raise ConfigError("rollouts", f"must be at least {MIN_ROLLOUTS}")
    out = Path(args.output_dir)
    writer = MetricsWriter(out, stem="variance", columns=VARIANCE_COLUMNS)
    n_cues = len(spec.operations) * spec.n_operands
    policy = SoftmaxSequencePolicy(spec.modulus, args.context_order, n_cues)
    report = check_ordering(spec, policy, args.rollouts, seed=args.seed)
    if args.threshold is not None:
        for stage in STAGES:
            report.steps_to_threshold[stage] = steps_to_threshold(
                stage, spec, policy, args.threshold, learning_rate=args.learning_rate, batch=args.batch,
                max_steps=args.max_steps, seed=args.seed)
    record = report.to_record()
    with writer:
        for stage in STAGES:
            e = report.estimates[stage]
            writer.write_row({"schema_version": 1, "stage": stage.value, "horizon": e.horizon, "rollouts": e.rollouts,
                              "variance": e.variance, "halfwidth": e.halfwidth,
                              "steps_to_threshold": report.steps_to_threshold.get(stage)})
    (out / "variance_report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if not args.no_plots:
        plotting.plot_variance(record, out)
    _emit(record)
    return EXIT_OK


def _read_buffer(path: str) -> MetacogBuffer:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    return MetacogBuffer.load(data)


def cmd_buffer(args) -> int:
    if args.action == "inspect":
        buf = _read_buffer(args.file)
        _emit({"capacity": buf.capacity, "entries": len(buf), "next_seq": buf.next_seq, "k1": buf.params.k1,
               "b": buf.params.b, "avg_len": buf.avg_len})
        for e in buf.entries:
            _emit({"seq": e.seq, "problem": e.problem, "steps": len(e.steps), "final_answer": e.final_answer})
    elif args.action == "query":
        buf = _read_buffer(args.file)
        if not len(buf):
            _emit({"query": args.text, "match": None, "fallback": "seed demonstration"})
        else:
            best = buf.retrieve_best(args.text)
            _emit({"query": args.text, "match": best.to_record(), "score": buf.score(args.text, best)})
    elif args.action == "load":
        buf = _read_buffer(args.file)
        _emit({"ok": True, "entries": len(buf), "capacity": buf.capacity})
    else:
        buf = MetacogBuffer(args.capacity)
        try:
            lines = Path(args.entries).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise UsageError(f"cannot read {args.entries}: {exc.strerror}") from None
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = MetacogEntry(rec["problem"], tuple(tuple(s) for s in rec["steps"]), rec["final_answer"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"{args.entries}:{lineno}: bad entry ({exc})") from None
            buf.insert_if_correct(entry, 1)
        Path(args.out).write_bytes(buf.snapshot())
        _emit({"ok": True, "entries": len(buf), "out": args.out})
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    other = cfg.replace(mode="dapo-only" if cfg.mode == "metacog" else "metacog")
    report = compare_modes(cfg, other, num_seeds=args.num_seeds, targets=args.targets or (),
                           thresholds=args.thresholds or ())
    _emit({"command": "compare", **report.to_summary(), "files": [str(p) for p in report.files]})
    return EXIT_OK


GRADCHECK_COLUMNS = ("schema_version", "loss", "instance", "max_relative_error")


def cmd_gradcheck(args) -> int:
    kinds = list(gradcheck_mod.LOSSES) if args.loss == "all" else [args.loss]
    if not 1e-7 <= args.step <= 1e-3:
        raise ConfigError("step", "must lie in [1e-7, 1e-3]")
    worst = {}
    with MetricsWriter(args.output_dir, stem="gradcheck", columns=GRADCHECK_COLUMNS) as writer:
        for kind in kinds:
            errors = gradcheck_mod.run_suite(kind, args.instances, args.seed, args.step)
            for i, e in enumerate(errors):
                writer.write_row({"schema_version": 1, "loss": kind, "instance": i, "max_relative_error": e})
            worst[kind] = max(errors) if errors else 0.0
    passed = all(v <= args.tolerance for v in worst.values())
    _emit({"command": "gradcheck", "max_relative_error": worst, "tolerance": args.tolerance, "passed": passed})
    return EXIT_OK if passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metacog-rl", description="Hierarchical metacognitive RL toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="full training loop")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="fill batches without updating; exports batches.jsonl")
    _add_run_options(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("variance-check", help="Monte Carlo gradient-variance ordering across stages")
    p.add_argument("--horizon", type=int, default=12)
    p.add_argument("--sub-count", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--rollouts", type=int, default=100_000)
    p.add_argument("--modulus", type=int, default=5)
    p.add_argument("--operand-min", type=int, default=0)
    p.add_argument("--operand-max", type=int, default=4)
    p.add_argument("--operations", default="add,sub,mul")
    p.add_argument("--context-order", type=int, choices=(0, 1), default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=None,
                   help="also report gradient-ascent steps until per-step accuracy reaches this value")
    p.add_argument("--learning-rate", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--output-dir", default="runs/variance")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("buffer", help="inspect, query, validate or build metabuffer snapshots")
    bsub = p.add_subparsers(dest="action", required=True)
    q = bsub.add_parser("inspect")
    q.add_argument("file")
    q = bsub.add_parser("query")
    q.add_argument("file")
    q.add_argument("text")
    q = bsub.add_parser("load")
    q.add_argument("file")
    q = bsub.add_parser("snapshot", help="build a snapshot from demonstration records")
    q.add_argument("--entries", required=True, help="jsonl with problem, steps, final_answer")
    q.add_argument("--capacity", type=int, default=512)
    q.add_argument("--out", required=True)
    p.set_defaults(func=cmd_buffer)

    p = sub.add_parser("compare", help="paired metacog vs dapo-only runs")
    _add_run_options(p)
    p.add_argument("--num-seeds", type=int, default=30)
    p.add_argument("--targets", type=_floats, default=None, help="cumulative valid-group targets")
    p.add_argument("--thresholds", type=_floats, default=None, help="held-out accuracy thresholds")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--loss", choices=("combined", "dapo", "sft", "all"), default="all")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--output-dir", default="runs/gradcheck")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, DatasetError, MetricsPathError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SnapshotParseError as exc:
        print(f"error: malformed snapshot: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
