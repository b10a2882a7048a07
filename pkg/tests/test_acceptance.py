"""One test per acceptance criterion; each records a PASS/FAIL line shown in the terminal summary."""

import math
import re
import statistics
import time
from collections import Counter

import numpy as np
import pytest

import metacog_rl.rollout as rollout_mod
from conftest import ACCEPTANCE_LINES
from metacog_rl.envlab import ChainTaskSpec, check_ordering
from metacog_rl.harness.cli import main
from metacog_rl.harness.compare import compare_modes
from metacog_rl.harness.config import RunConfig
from metacog_rl.harness.gradcheck import run_suite
from metacog_rl.harness.runs import build_backend, build_dataset, execute
from metacog_rl.metabuffer import MetacogBuffer, MetacogEntry
from metacog_rl.objective import ClipConfig, RolloutGroup, clipped_terms, dapo_loss, normalize_advantages
from metacog_rl.policy import ScriptedPolicy, SoftmaxBackend, SoftmaxSequencePolicy
from metacog_rl.envlab.codec import CharCodec
from metacog_rl.rollout import Mode, ObjectiveConfig, StepConfig, fill_batch, train_loop, train_step
from metacog_rl.templates import RenderedPrompt, render
from metacog_rl.types import CompletionSample, Problem, Stage

D, C, R = Stage.DIRECT, Stage.DECOMPOSITION, Stage.REFLECTION


def record(n: int, title: str, ok: bool, detail: str, started: float) -> None:
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} -- {detail} ({time.perf_counter() - started:.1f}s)"
    print(ACCEPTANCE_LINES[n])
    assert ok, ACCEPTANCE_LINES[n]


# -- 1 -----------------------------------------------------------------------

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    errors = run_suite("combined", instances=50, seed=0, step=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    record(1, "combined-loss finite-difference check", worst <= 1e-5 and elapsed < 60 and len(errors) == 50,
           f"50 instances, max relative error {worst:.2e} (limit 1e-5)", t0)


# -- 2 -----------------------------------------------------------------------

def _one_token(ratio, adv, backend, problem):
    new = backend.score_tokens("q", (0,))
    s = CompletionSample(D, problem, "q", "a", tokens=(0,), logprobs=new - math.log(ratio), reward=1)
    return RolloutGroup(problem, D, [s], [1], 0.5, np.array([adv]))


def test_c02_clip_arithmetic():
    t0 = time.perf_counter()
    clip = ClipConfig(0.20, 0.28)
    b = SoftmaxBackend(SoftmaxSequencePolicy(4, 1, 1, rng_seed=0), CharCodec("abcd", 2))
    problem = Problem("p", "q", "a")
    samples = b.sample_group(RenderedPrompt(D, "q", "q"), 2)
    for s, r in zip(samples, (1, -1)):
        s.problem, s.reward = problem, r
    ratio_one = dapo_loss([RolloutGroup.from_samples(problem, D, samples)], b, clip).loss
    high = dapo_loss([_one_token(1.5, 1.0, b, problem)], b, clip).loss
    low = dapo_loss([_one_token(0.5, -1.0, b, problem)], b, clip).loss
    t_high, _ = clipped_terms(np.array([1.5]), np.array([1.0]), clip)
    t_low, _ = clipped_terms(np.array([0.5]), np.array([-1.0]), clip)
    ok = (abs(ratio_one) <= 1e-12 and abs(high + 1.28) <= 1e-12 and abs(low - 0.8) <= 1e-12
          and abs(-t_high[0] + 1.28) <= 1e-12 and abs(-t_low[0] - 0.8) <= 1e-12)
    record(2, "clip arithmetic", ok, f"ratio-1 loss {ratio_one:.1e}, 1.5/+1 -> {high:.12f}, 0.5/-1 -> {low:.12f}", t0)


# -- 3 -----------------------------------------------------------------------

def test_c03_advantage_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_mean = worst_std = 0.0
    for _ in range(1000):
        g = int(rng.integers(2, 65))
        r = rng.choice([-1, 1], size=g)
        if len(set(r)) == 1:
            r[int(rng.integers(g))] *= -1
        a = normalize_advantages(r)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = max(worst_std, abs(a.std() - 1))
    a = normalize_advantages([1, 1, -1, -1, -1, -1])
    closed = max(np.max(np.abs(a[:2] - math.sqrt(2))), np.max(np.abs(a[2:] + 1 / math.sqrt(2))))
    ok = worst_mean <= 1e-9 and worst_std <= 1e-9 and closed <= 1e-12
    record(3, "advantage normalization", ok,
           f"1000 vectors, max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, closed-form error {closed:.1e}", t0)


# -- 4 -----------------------------------------------------------------------

def _terms(text):
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]


def _brute_force_best(query, entries, k1=1.2, b=0.75):
    docs = [_terms(e.problem) for e in entries]
    n = len(docs)
    df = Counter(t for d in docs for t in set(d))
    avg = sum(map(len, docs)) / n
    best, best_score = None, -1.0
    for e, d in zip(entries, docs):
        tf = Counter(d)
        norm = k1 * (1 - b + b * (len(d) / avg if avg > 0 else 1.0))
        score = 0.0
        for w in _terms(query):
            f = tf.get(w, 0)
            if f:
                idf = math.log((n - df[w] + 0.5) / (df[w] + 0.5) + 1.0)
                score += idf * f * (k1 + 1) / (f + norm)
        if score > best_score or (score == best_score and e.seq < best.seq):
            best, best_score = e, score
    return best


def test_c04_bm25_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    vocab = [f"w{i}" for i in range(30)]
    matches = total = 0
    for _ in range(500):
        size = int(rng.integers(1, 1001))
        buf = MetacogBuffer(capacity=int(rng.integers(1, size + 1)))
        for _ in range(size):
            words = rng.choice(vocab, size=int(rng.integers(0, 6)))
            buf.insert_if_correct(MetacogEntry(" ".join(words), (("s", "a"),), "1"), 1)
        query = " ".join(rng.choice(vocab, size=int(rng.integers(1, 5))))
        matches += buf.retrieve_best(query) == _brute_force_best(query, buf.entries)
        total += 1
    elapsed = time.perf_counter() - t0
    record(4, "BM25 retrieval vs brute force", matches == total and elapsed < 60,
           f"{matches}/{total} buffers match", t0)


# -- 5 -----------------------------------------------------------------------

def test_c05_fifo_gating():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    failures = 0
    sequences = 2000
    for _ in range(sequences):
        cap = int(rng.integers(1, 12))
        buf = MetacogBuffer(capacity=cap)
        model: list[tuple[str, str]] = []  # (problem, step answer)
        for i in range(int(rng.integers(0, 60))):
            problem = f"problem {int(rng.integers(0, 15))}"
            reward = int(rng.choice([1, 1, -1]))
            before = buf.snapshot()
            accepted = buf.insert_if_correct(MetacogEntry(problem, (("s", str(i)),), "1"), reward)
            if reward == -1:
                failures += accepted or buf.snapshot() != before
                continue
            model = [m for m in model if m[0] != problem] + [(problem, str(i))]
            model = model[-cap:]
            failures += len(buf) > cap
        failures += [(e.problem, e.steps[0][1]) for e in buf.entries] != model
    record(5, "metabuffer FIFO and gating", failures == 0, f"{sequences} random insert sequences, {failures} violations",
           t0)


# -- 6 -----------------------------------------------------------------------

def test_c06_control_flow():
    t0 = time.perf_counter()
    probs = [Problem(f"p{i}", f"problem {i}", str(i)) for i in range(16)]

    def policy(d, c, r, seed=0):
        return ScriptedPolicy({D: d, C: c, R: r}, lambda t: t.split()[-1], rng_seed=seed)

    cfg = StepConfig(prompts_per_step=16, group_size=8, target_groups=8)
    a = policy(0.5, 0.5, 0.5)
    fill_a = fill_batch(probs, a, MetacogBuffer(), cfg)
    ok_a = a.calls[C] == 0 and a.calls[R] == 0 and len(fill_a.buffer) == 8

    b = policy(0.0, 0.5, 0.5)
    fill_b = fill_batch(probs, b, MetacogBuffer(), StepConfig(prompts_per_step=16, group_size=8, target_groups=16))
    ok_b = b.samples_drawn[C] == 16 * 8 and all(path[:2] == [D, C] for path in fill_b.provenance.values())

    c = policy(0.0, 0.0, 0.0)
    fill_c = fill_batch(probs, c, MetacogBuffer(), cfg)
    report = train_step(fill_c, c, cfg, ObjectiveConfig(), None)
    ok_c = report.skip and dict(c.calls) == {D: 16, C: 16, R: 16}
    record(6, "cascade control flow", ok_a and ok_b and ok_c,
           f"(a) extra calls {a.calls[C] + a.calls[R]}, (b) decomposition samples {b.samples_drawn[C]}/128, "
           f"(c) skip={report.skip}", t0)


# -- shared toy config (criteria 7, 8, 11) -----------------------------------

TOY = RunConfig(steps=500, prompts_per_step=16, group_size=8, target_groups=16, learning_rate=30.0, eval_every=5,
                plots=False, output_dir="unused")


# -- 7 -----------------------------------------------------------------------

def test_c07_no_degenerate_group_trains(monkeypatch):
    t0 = time.perf_counter()
    seen = {"groups": 0, "bad": 0, "calls": 0}
    inner = rollout_mod.combined_loss

    def checked(groups, *args, **kw):
        seen["calls"] += 1
        for g in groups:
            seen["groups"] += 1
            seen["bad"] += not (0 < g.accuracy < 1) or len(set(g.rewards)) < 2
        return inner(groups, *args, **kw)

    monkeypatch.setattr(rollout_mod, "combined_loss", checked)
    cfg = TOY.replace(steps=200)
    result = execute(cfg, write=False)
    ok = seen["bad"] == 0 and seen["calls"] > 0 and len(result.reports) == 200
    record(7, "only mixed groups enter training", ok,
           f"200 steps, {seen['calls']} updates, {seen['groups']} groups checked, {seen['bad']} degenerate", t0)


# -- 8 -----------------------------------------------------------------------

def test_c08_sft_prompt_consistency():
    t0 = time.perf_counter()
    cfg = TOY.replace(steps=200)
    data = build_dataset(cfg)
    backend = build_backend(cfg, data)
    expected: list[str] = []
    stats = {"pairs": 0, "mismatch": 0}

    def on_fill(step, fill):
        expected.clear()
        for g in fill.buffer.groups:
            if g.stage.is_metacognitive:
                expected.extend(render(D, g.problem.text).text for s in g.samples if s.reward == 1)

    def hook(pairs):
        stats["pairs"] += len(pairs)
        prompts = [p for p, _ in pairs]
        stats["mismatch"] += prompts != expected

    train_loop(data.train, backend, cfg.step_config(), cfg.objective_config(), cfg.steps, seed=cfg.seed,
               metabuffer=cfg.new_metabuffer(), on_fill=on_fill, pair_hook=hook)
    ok = stats["pairs"] > 0 and stats["mismatch"] == 0
    record(8, "SFT prompts equal the direct render", ok,
           f"{stats['pairs']} pairs over 200 steps, {stats['mismatch']} mismatched steps", t0)


# -- 9 -----------------------------------------------------------------------

def test_c09_variance_ordering():
    t0 = time.perf_counter()
    spec = ChainTaskSpec(horizon=12, sub_count=3, gamma=0.5)
    policy = SoftmaxSequencePolicy(spec.modulus, 1, len(spec.operations) * spec.n_operands)
    report = check_ordering(spec, policy, 100_000, seed=0)
    elapsed = time.perf_counter() - t0
    e = report.estimates
    detail = ", ".join(f"{s.value} {e[s].variance:.3f}+-{e[s].halfwidth:.3f}" for s in (D, C, R))
    record(9, "stage variance ordering", report.ordering_satisfied and elapsed < 300,
           f"{detail}; ratio ref/dec {report.ref_dec_ratio:.3f}", t0)


# -- 10 ----------------------------------------------------------------------

def test_c10_sample_efficiency(tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig(backend="scripted", steps=40, prompts_per_step=32, group_size=16, target_groups=32,
                    hard_fraction=0.5, direct_success_hard=0.05, direct_success_easy=0.5,
                    decomposition_success=0.6, reflection_success=0.4, plots=False, output_dir=str(tmp_path))
    targets = tuple(float(32 * m) for m in (1, 5, 10))
    report = compare_modes(cfg, cfg.replace(mode="dapo-only"), num_seeds=30, targets=targets, write=False)
    frac = report.strictly_more_fraction()
    fewer = {t: report.fewer_batches(t) for t in targets}
    ok = frac >= 0.9 and all(v >= 28 for v in fewer.values())
    record(10, "valid-group efficiency vs dapo-only", ok,
           f"strictly more in {frac:.1%} of steps; fewer batches to target " +
           ", ".join(f"{int(t)}: {v}/30" for t, v in fewer.items()), t0)


# -- 11 ----------------------------------------------------------------------

def test_c11_end_to_end_learning():
    t0 = time.perf_counter()
    steps_to = {m: [] for m in Mode}
    finals, baselines = [], []
    for seed in range(10):
        for mode in Mode:
            result = execute(TOY.replace(seed=seed, mode=mode.value), write=False)
            steps = result.steps_to_accuracy(0.8)
            steps_to[mode].append(math.inf if steps is None else steps)
            baselines.append(result.baseline_accuracy)
            if mode is Mode.METACOG:
                finals.append(result.final_accuracy)
    elapsed = time.perf_counter() - t0
    med = {m: statistics.median(v) for m, v in steps_to.items()}
    ok = (max(baselines) <= 0.2 and min(finals) >= 0.8 and med[Mode.METACOG] <= med[Mode.DAPO_ONLY]
          and elapsed < 600)
    record(11, "toy end-to-end learning", ok,
           f"baseline <= {max(baselines):.3f}, metacog final >= {min(finals):.3f}, median steps to 80%: "
           f"metacog {med[Mode.METACOG]}, dapo-only {med[Mode.DAPO_ONLY]}", t0)


# -- 12 ----------------------------------------------------------------------

RUN_FLAGS = ["--steps", "3", "--prompts-per-step", "8", "--group-size", "4", "--target-groups", "8",
             "--train-size", "32", "--heldout-size", "16", "--eval-every", "1", "--snapshot-every", "2"]

SUBCOMMANDS = {
    "train": (["train", *RUN_FLAGS], ["metrics.jsonl", "metrics.csv", "metabuffer.jsonl", "metabuffer-step00002.jsonl"]),
    "rollout": (["rollout", *RUN_FLAGS], ["metrics.jsonl", "metrics.csv", "metabuffer.jsonl", "batches.jsonl"]),
    "compare": (["compare", *RUN_FLAGS, "--backend", "scripted", "--num-seeds", "2"],
                ["compare.jsonl", "compare.csv", "compare_summary.json"]),
    "variance-check": (["variance-check", "--horizon", "6", "--rollouts", "2000"],
                       ["variance.jsonl", "variance.csv", "variance_report.json"]),
    "gradcheck": (["gradcheck", "--instances", "3"], ["gradcheck.jsonl", "gradcheck.csv"]),
}


def test_c12_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    differing = []
    for name, (argv, files) in SUBCOMMANDS.items():
        outs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            assert main([*argv, "--output-dir", str(out)]) == 0
            outs.append(out)
        differing += [f"{name}/{f}" for f in files if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes()]
    entries = tmp_path / "entries.jsonl"
    entries.write_text('{"problem": "a b", "steps": [["q", "a"]], "final_answer": "1"}\n')
    snaps = []
    for run in ("a", "b"):
        snaps.append(tmp_path / f"snap-{run}.jsonl")
        assert main(["buffer", "snapshot", "--entries", str(entries), "--out", str(snaps[-1])]) == 0
    if snaps[0].read_bytes() != snaps[1].read_bytes():
        differing.append("buffer snapshot")
    capsys.readouterr()
    record(12, "byte-identical reruns", not differing,
           f"{len(SUBCOMMANDS) + 1} subcommands compared" + (f"; differing: {differing}" if differing else ""), t0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
