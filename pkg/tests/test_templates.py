import pytest
from hypothesis import given
from hypothesis import strategies as st

from metacog_rl.metabuffer import MetacogEntry
from metacog_rl.templates import (
    SEED_DEMO,
    StructuredSolution,
    TemplateError,
    TemplateSet,
    parse_structured,
    render,
    rewrite_to_direct,
    serialize_demo,
    serialize_solution,
)
from metacog_rl.types import CompletionSample, Problem, Stage
from metacog_rl.verify import extract_answer

LINEAR_EXAMPLE = """Example problem: Solve the equation $\\frac{3(x-2)}{4} - \\frac{2x+5}{3} = \\frac{1}{6}$.

Solution:

Subproblem 1: Eliminate denominators by multiplying all terms by the least common multiple (LCM) of 4, 3, and 6, which is 12:
$12 \\cdot \\frac{3(x-2)}{4} - 12 \\cdot \\frac{2x+5}{3} = 12 \\cdot \\frac{1}{6}$. Simplifies to: $9(x-2) - 4(2x+5) = 2$.

Subproblem 2: Expand and simplify:
   $9x - 18 - 8x - 20 = 2$. Combine like terms: $x - 38 = 2$

Subproblem 3: Isolate the variable:
   $x = 2 + 38, x = 40$.

Final Solution:

Substituting $x=40$ back into the original equation confirms both sides equal $\\frac{1}{6}$.

Answer: 40
"""


def correct_sample(stage=Stage.DECOMPOSITION, reward=1, text="Subproblem 1: A\nwork\nAnswer: 5"):
    problem = Problem("p", "What is 2+3?", "5")
    return CompletionSample(stage, problem, "prompt", text, reward=reward, structured=parse_structured(text))


class TestRender:
    def test_direct(self):
        p = render(Stage.DIRECT, "What is 2+2?")
        assert "What is 2+2?" in p.text
        assert p.text.rstrip().endswith('Remember to put your answer on its own line after "Answer:"')
        assert "decomposition" not in p.text.lower() and "wrong solution" not in p.text
        assert p.demo is None and p.prior is None

    def test_decomposition_embeds_demo(self):
        p = render(Stage.DECOMPOSITION, "Q?", demo=SEED_DEMO)
        block = serialize_demo(SEED_DEMO)
        assert p.text.count(block) == 1
        assert "Subproblem 3: Isolate the variable:" in block
        assert block.endswith("Final Solution:\n\nAnswer: 40")
        assert p.demo is SEED_DEMO

    def test_reflection_embeds_prior(self):
        prior = StructuredSolution((("Solve for y", "y = 4x - 3"),), "(0.5, 2)")
        p = render(Stage.REFLECTION, "Q?", prior=prior)
        head, tail = p.text.split("The existing wrong solution:")
        assert "Q?" in head
        assert tail.count(serialize_solution(prior)) == 1

    @pytest.mark.parametrize("kind", [Stage.DECOMPOSITION, Stage.REFLECTION])
    def test_missing_context(self, kind):
        with pytest.raises(TemplateError):
            render(kind, "Q?")

    def test_no_reexpansion(self):
        p = render(Stage.DIRECT, "literal {demo} and {prior}")
        assert "literal {demo} and {prior}" in p.text

    def test_pure(self):
        a = render(Stage.DECOMPOSITION, "Q", demo=SEED_DEMO)
        b = render(Stage.DECOMPOSITION, "Q", demo=SEED_DEMO)
        assert a.text == b.text

    def test_custom_dir(self, tmp_path):
        (tmp_path / "direct.txt").write_text("D {problem}")
        (tmp_path / "decomposition.txt").write_text("C {demo} {problem}")
        (tmp_path / "reflection.txt").write_text("R {prior} {problem}")
        t = TemplateSet.from_dir(tmp_path)
        assert render(Stage.DIRECT, "x", templates=t).text == "D x"

    def test_template_missing_placeholder(self):
        texts = {Stage.DIRECT: "{problem}", Stage.DECOMPOSITION: "{problem}", Stage.REFLECTION: "{problem} {prior}"}
        with pytest.raises(TemplateError):
            TemplateSet(texts)


class TestParse:
    def test_two_steps(self):
        s = parse_structured("Subproblem 1: A\nwork1\nSubproblem 2: B\nwork2\nAnswer: 5")
        assert s.steps == (("A", "work1"), ("B", "work2"))
        assert s.final_answer == "5"

    def test_answer_only(self):
        s = parse_structured("Answer: 7")
        assert s.steps == () and s.final_answer == "7"

    def test_markerless_keeps_raw(self):
        s = parse_structured("just some words")
        assert s.steps == () and s.final_answer is None and s.raw == "just some words"

    def test_linear_example(self):
        s = parse_structured(LINEAR_EXAMPLE)
        assert len(s.steps) == 3
        assert s.final_answer == "40"
        assert s.steps[2][0] == "Isolate the variable:"
        assert "Substituting" not in s.steps[2][1]

    def test_case_and_bold(self):
        s = parse_structured("**SUBPROBLEM 1:** a\nb\nAnswer: 1")
        assert s.steps == (("a", "b"),)

    @given(st.text(max_size=80))
    def test_final_matches_extract(self, text):
        assert parse_structured(text).final_answer == extract_answer(text)


LINE = st.text(alphabet="abcxyz0123=+ ", min_size=1, max_size=12).map(str.strip).filter(bool)


class TestRoundTrip:
    @given(st.lists(st.tuples(LINE, LINE), max_size=5), LINE)
    def test_canonical_round_trip(self, steps, final):
        s = StructuredSolution(tuple(steps), final)
        back = parse_structured(serialize_solution(s))
        assert back.steps == s.steps and back.final_answer == s.final_answer

    @given(st.lists(st.tuples(LINE, LINE), min_size=1, max_size=4), LINE)
    def test_demo_round_trip(self, steps, final):
        entry = MetacogEntry("problem", tuple(steps), final)
        back = parse_structured(serialize_demo(entry))
        assert back.steps == entry.steps and back.final_answer == final


class TestRewrite:
    @pytest.mark.parametrize("stage", [Stage.DECOMPOSITION, Stage.REFLECTION])
    def test_prompt_is_direct_render(self, stage):
        sample = correct_sample(stage)
        prompt, target = rewrite_to_direct(sample)
        assert prompt == render(Stage.DIRECT, sample.problem.text).text
        assert target.splitlines()[-1] == "Answer: 5"

    def test_negative_reward(self):
        with pytest.raises(TemplateError):
            rewrite_to_direct(correct_sample(reward=-1))

    def test_direct_stage(self):
        with pytest.raises(TemplateError):
            rewrite_to_direct(correct_sample(Stage.DIRECT))

    def test_parses_when_structure_missing(self):
        sample = correct_sample()
        sample.structured = None
        _, target = rewrite_to_direct(sample)
        assert target == "Subproblem 1: A\nwork\nAnswer: 5"
