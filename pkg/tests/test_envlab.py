import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metacog_rl.envlab import (
    ChainCodec,
    ChainTaskSpec,
    CodecError,
    TaskSpecError,
    check_ordering,
    estimate_gradient_variance,
    generate_tasks,
    oracle_solve,
    parse_chain,
    steps_to_threshold,
)
from metacog_rl.envlab.evaluation import chain_success_probability, expected_accuracy, sampled_accuracy
from metacog_rl.envlab.tasks import chain_text, evaluate_chain, make_task
from metacog_rl.envlab.variance import _dense, stage_blocks
from metacog_rl.policy import SoftmaxBackend, SoftmaxSequencePolicy
from metacog_rl.templates import render
from metacog_rl.types import STAGES, Stage
from metacog_rl.verify import extract_answer


def lab_policy(spec, params=None, seed=0, order=1):
    n_cues = len(spec.operations) * spec.n_operands
    return SoftmaxSequencePolicy(spec.modulus, order, n_cues, params=params, rng_seed=seed)


def eval_exact(expr: str) -> int:
    """Left-to-right integer evaluation of a parenthesized chain, independent of the task code."""
    return int(eval(expr, {"__builtins__": {}}))  # noqa: S307 - digits, operators and parens only


class TestTasks:
    def test_single_op(self):
        spec = ChainTaskSpec(horizon=1, sub_count=1, operand_min=2, operand_max=3, operations=("add",), modulus=None)
        task = make_task(spec, 2, (("add", 3),), "t")
        assert task.problem.text == "2+3"
        assert oracle_solve(task).raw == "5"
        assert len(task.decomposition.steps) == 1

    def test_two_ops(self):
        spec = ChainTaskSpec(horizon=2, sub_count=1, operand_min=2, operand_max=4, modulus=None)
        task = make_task(spec, 2, (("add", 3), ("mul", 4)), "t")
        assert task.problem.text == "(2+3)*4"
        assert oracle_solve(task).raw == "20"

    def test_decomposition_steps(self):
        spec = ChainTaskSpec(horizon=4, sub_count=2, modulus=7)
        for task in generate_tasks(spec, 20):
            assert len(task.decomposition.steps) == 2
            assert task.decomposition.final_answer == task.ground_truth.raw

    def test_deterministic(self):
        spec = ChainTaskSpec(seed=4)
        a = [t.problem for t in generate_tasks(spec, 30)]
        b = [t.problem for t in generate_tasks(spec, 30)]
        assert a == b

    @pytest.mark.parametrize("modulus", [None, 5, 11])
    def test_oracle_over_many_tasks(self, modulus):
        spec = ChainTaskSpec(horizon=6, sub_count=2, operand_min=0, operand_max=9, modulus=modulus, seed=1)
        tasks = generate_tasks(spec, 10_000 if modulus is None else 2000)
        for task in tasks:
            assert oracle_solve(task) == task.ground_truth
        if modulus is None:
            for task in tasks[:2000]:
                assert str(eval_exact(task.problem.text)) == task.ground_truth.raw

    def test_negative_operands_round_trip(self):
        text = chain_text(-3, (("sub", -2), ("mul", 4)), None)
        assert parse_chain(text) == (-3, (("sub", -2), ("mul", 4)), None)
        assert eval_exact(text) == -4

    def test_overflow_rejection(self):
        spec = ChainTaskSpec(horizon=6, sub_count=1, operand_min=9, operand_max=9, operations=("mul",),
                             modulus=None, max_abs=100, max_retries=5)
        with pytest.raises(RuntimeError):
            generate_tasks(spec, 1)

    @pytest.mark.parametrize("kw", [dict(horizon=0), dict(sub_count=5), dict(gamma=0.0), dict(operations=("div",)),
                                    dict(modulus=1), dict(operand_min=3, operand_max=1)])
    def test_invalid_spec(self, kw):
        with pytest.raises(TaskSpecError):
            ChainTaskSpec(**kw)

    @given(st.integers(1, 24).flatmap(lambda h: st.tuples(st.just(h), st.sampled_from(
        [k for k in range(1, h + 1) if h % k == 0]))), st.floats(0.01, 0.99))
    def test_horizon_ordering(self, hk, gamma):
        h, k = hk
        spec = ChainTaskSpec(horizon=h, sub_count=k, gamma=gamma)
        assert spec.reflect_horizon <= gamma * spec.sub_horizon + 1
        if spec.is_valid:
            assert spec.reflect_horizon < spec.sub_horizon < spec.horizon
        else:
            with pytest.raises(TaskSpecError):
                spec.validate()

    @given(st.text(max_size=20))
    def test_parse_chain_never_crashes(self, text):
        parse_chain(text)


class TestCodec:
    spec = ChainTaskSpec(horizon=4, sub_count=2, operand_min=0, operand_max=2, operations=("add", "mul"), modulus=7)

    def test_round_trip(self):
        codec = ChainCodec(self.spec)
        rng = np.random.default_rng(0)
        for task in generate_tasks(self.spec, 50):
            prompt = render(Stage.DIRECT, task.problem.text).text
            toks = tuple(int(t) for t in rng.integers(0, 7, size=4))
            text = codec.decode(prompt, toks)
            assert codec.encode(prompt, text) == toks
            assert extract_answer(text) == str(toks[-1])

    def test_oracle_solution_is_correct_decoding(self):
        codec = ChainCodec(self.spec)
        task = generate_tasks(self.spec, 1)[0]
        prompt = render(Stage.DIRECT, task.problem.text).text
        truth = evaluate_chain(task.start, task.steps, 7)[1:]
        assert extract_answer(codec.decode(prompt, truth)) == task.ground_truth.raw

    def test_rejects_non_canonical(self):
        codec = ChainCodec(self.spec)
        prompt = render(Stage.DIRECT, generate_tasks(self.spec, 1)[0].problem.text).text
        with pytest.raises(CodecError):
            codec.encode(prompt, "Answer: 3")

    def test_needs_modulus(self):
        with pytest.raises(CodecError):
            ChainCodec(self.spec.with_(modulus=None))

    def test_no_chain_in_prompt(self):
        with pytest.raises(CodecError):
            ChainCodec(self.spec).layout("What is the capital of France?")


class TestEvaluation:
    spec = ChainTaskSpec(horizon=3, sub_count=1, operand_min=0, operand_max=2, operations=("add", "mul"), modulus=5)

    def test_forward_recursion_matches_enumeration(self):
        rng = np.random.default_rng(3)
        pol = lab_policy(self.spec, params=rng.normal(0, 1.5, size=(6 * 6, 5)))
        codec = ChainCodec(self.spec)
        for task in generate_tasks(self.spec, 10):
            cues, first = codec.layout(task.problem.text)
            brute = sum(math.exp(pol.log_probs(seq, cues, first).sum())
                        for seq in itertools.product(range(5), repeat=3) if seq[-1] == int(task.problem.answer))
            assert chain_success_probability(pol, cues, first, int(task.problem.answer)) == pytest.approx(brute, abs=1e-12)

    def test_uniform_accuracy(self):
        problems = [t.problem for t in generate_tasks(self.spec, 20)]
        b = SoftmaxBackend(lab_policy(self.spec), ChainCodec(self.spec))
        assert expected_accuracy(b, problems) == pytest.approx(0.2, abs=1e-12)

    def test_sampled_agrees_with_expected(self):
        rng = np.random.default_rng(4)
        b = SoftmaxBackend(lab_policy(self.spec, params=rng.normal(0, 2, size=(36, 5)), seed=1), ChainCodec(self.spec))
        problems = [t.problem for t in generate_tasks(self.spec, 20)]
        exact = expected_accuracy(b, problems)
        assert abs(sampled_accuracy(b, problems, samples=500) - exact) < 0.03


class TestVariance:
    def test_closed_form_single_step(self):
        # one context, uniform over m values, reward on one of them: Var = (1/m)(1 - 1/m)^2
        for m in (2, 5):
            spec = ChainTaskSpec(horizon=1, sub_count=1, operand_min=0, operand_max=0, operations=("add",), modulus=m)
            var, hw = estimate_gradient_variance(Stage.DIRECT, spec, lab_policy(spec), 200_000, seed=1)
            expected = (1 / m) * (1 - 1 / m) ** 2
            assert abs(var - expected) <= max(hw, 1e-3)
        assert (1 / 5) * (1 - 1 / 5) ** 2 == pytest.approx(0.128)

    def test_deterministic_policy_zero(self):
        spec = ChainTaskSpec(horizon=6, sub_count=2, modulus=5)
        params = np.full((lab_policy(spec).n_contexts, 5), -np.inf)
        params[:, 1] = 0.0
        pol = lab_policy(spec, params=params)
        for stage in STAGES:
            assert estimate_gradient_variance(stage, spec, pol, 1000) == (0.0, 0.0)

    def test_halfwidth_shrinks(self):
        spec = ChainTaskSpec(horizon=6, sub_count=2, modulus=5)
        pol = lab_policy(spec)
        _, small = estimate_gradient_variance(Stage.DIRECT, spec, pol, 4000, seed=2)
        _, big = estimate_gradient_variance(Stage.DIRECT, spec, pol, 16000, seed=2)
        assert 1.6 < small / big < 2.5

    def test_no_decomposition_matches_direct(self):
        spec = ChainTaskSpec(horizon=6, sub_count=1, gamma=1.0, modulus=5)
        pol = lab_policy(spec)
        d, hd = estimate_gradient_variance(Stage.DIRECT, spec, pol, 5000, seed=3)
        c, hc = estimate_gradient_variance(Stage.DECOMPOSITION, spec, pol, 5000, seed=3)
        assert abs(d - c) <= max(hd, hc)

    def test_dense_matches_naive_gradients(self):
        spec = ChainTaskSpec(horizon=6, sub_count=3, modulus=5)
        rng = np.random.default_rng(5)
        pol = lab_policy(spec, params=rng.normal(size=(lab_policy(spec).n_contexts, 5)))
        for stage in STAGES:
            for blk in stage_blocks(stage, spec, pol, 40, seed=6):
                dense = _dense(pol, blk, 0, 40)
                for i in range(40):
                    naive = np.zeros_like(pol.params)
                    for c, a, g in zip(blk.ctx[i], blk.actions[i], blk.returns[i]):
                        onehot = np.zeros(5)
                        onehot[a] = 1.0
                        naive[c] += g * (onehot - pol.prob_table()[c])
                    assert np.allclose(dense[i], naive.ravel(), atol=1e-12)

    def test_matches_sample_covariance(self):
        spec = ChainTaskSpec(horizon=4, sub_count=2, modulus=5, operand_max=2)
        pol = lab_policy(spec, seed=2)
        blk = stage_blocks(Stage.DIRECT, spec, pol, 1000, seed=7)[0]
        g = _dense(pol, blk, 0, 1000)
        cov_trace = float(np.trace(np.cov(g, rowvar=False)))
        var, _ = estimate_gradient_variance(Stage.DIRECT, spec, pol, 1000, seed=7)
        assert var == pytest.approx(cov_trace, rel=1e-9)

    def test_zero_reward_environment(self):
        spec = ChainTaskSpec(horizon=6, sub_count=2, modulus=5)
        report = check_ordering(spec, lab_policy(spec), 1000, reward_fn=lambda a, t: np.zeros(a.shape))
        assert all(e.variance == 0.0 for e in report.estimates.values())
        assert report.ref_within_dec and not report.dec_below_direct and not report.ordering_satisfied
        assert report.ref_dec_ratio is None

    def test_bad_reward_range(self):
        spec = ChainTaskSpec(horizon=6, sub_count=2, modulus=5)
        with pytest.raises(ValueError):
            estimate_gradient_variance(Stage.DIRECT, spec, lab_policy(spec), 1000,
                                       reward_fn=lambda a, t: np.full(a.shape, 2.0))

    def test_too_few_rollouts(self):
        spec = ChainTaskSpec(modulus=5)
        with pytest.raises(ValueError):
            estimate_gradient_variance(Stage.DIRECT, spec, lab_policy(spec), 999)

    def test_incapable_policy(self):
        spec = ChainTaskSpec(modulus=5)
        with pytest.raises(TaskSpecError):
            estimate_gradient_variance(Stage.DIRECT, spec, SoftmaxSequencePolicy(3, 1, 1), 1000)
        with pytest.raises(TaskSpecError):
            estimate_gradient_variance(Stage.DIRECT, spec.with_(modulus=None), lab_policy(spec), 1000)

    def test_reflection_window_starts_at_first_error(self):
        spec = ChainTaskSpec(horizon=6, sub_count=2, gamma=0.5, modulus=5)
        blocks = stage_blocks(Stage.REFLECTION, spec, lab_policy(spec), 1000, seed=8)
        assert len(blocks) == 1 and blocks[0].ctx.shape == (1000, spec.reflect_horizon)

    def test_small_ordering(self):
        spec = ChainTaskSpec(horizon=6, sub_count=3, gamma=0.5, modulus=5)
        report = check_ordering(spec, lab_policy(spec), 5000, seed=9)
        assert report.ordering_satisfied
        assert len({e.rollouts for e in report.estimates.values()}) == 1
        rec = report.to_record()
        assert set(rec["stages"]) == {"direct", "decomposition", "reflection"}


class TestStepsToThreshold:
    spec = ChainTaskSpec(horizon=4, sub_count=2, gamma=0.5, operand_max=2, operations=("add",), modulus=5)

    def test_already_there(self):
        assert steps_to_threshold(Stage.DIRECT, self.spec, lab_policy(self.spec), 0.0) == 0

    def test_learns_and_leaves_policy_untouched(self):
        pol = lab_policy(self.spec)
        before = pol.params.copy()
        steps = steps_to_threshold(Stage.DECOMPOSITION, self.spec, pol, 0.5, learning_rate=2.0, batch=256,
                                   max_steps=200, eval_episodes=500, seed=0)
        assert steps is not None and steps > 0
        assert np.array_equal(pol.params, before)

    def test_budget_exhausted(self):
        assert steps_to_threshold(Stage.DIRECT, self.spec, lab_policy(self.spec), 1.01, max_steps=2,
                                  batch=32, eval_episodes=100) is None
