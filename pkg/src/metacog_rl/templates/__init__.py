"""Prompt templates for the three rollout stages and structured-output parsing.

Template texts live next to this module as ``direct.txt``, ``decomposition.txt``
and ``reflection.txt``; a directory with the same three files can replace them.
Placeholders are ``{problem}``, ``{demo}`` and ``{prior}``, substituted in a
single pass so inserted text is never re-expanded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from metacog_rl.metabuffer import MetacogEntry
from metacog_rl.types import CompletionSample, Stage
from metacog_rl.verify import ANSWER_MARKER, extract_answer

_PLACEHOLDER = re.compile(r"\{(problem|demo|prior)\}")
_STEP_MARKER = re.compile(r"^\s*(?:\*\*)?subproblem\s+(\d+)\s*:(?:\*\*)?[ \t]*(.*)$", re.IGNORECASE)
_FINAL_SECTION = re.compile(r"^\s*(?:\*\*)?final solution\b", re.IGNORECASE)


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class StructuredSolution:
    steps: tuple[tuple[str, str], ...]
    final_answer: Optional[str]
    raw: str = ""


@dataclass(frozen=True)
class RenderedPrompt:
    kind: Stage
    text: str
    problem: str
    demo: Optional[MetacogEntry] = None
    prior: Optional[StructuredSolution] = None


# Linear-equation demonstration used while the buffer is still empty.
SEED_DEMO = MetacogEntry(
    problem=r"Solve the equation $\frac{3(x-2)}{4} - \frac{2x+5}{3} = \frac{1}{6}$.",
    steps=(
        (
            "Eliminate denominators by multiplying all terms by the least common multiple (LCM) "
            "of 4, 3, and 6, which is 12:",
            r"$12 \cdot \frac{3(x-2)}{4} - 12 \cdot \frac{2x+5}{3} = 12 \cdot \frac{1}{6}$. "
            r"Simplifies to: $9(x-2) - 4(2x+5) = 2$.",
        ),
        ("Expand and simplify:", "$9x - 18 - 8x - 20 = 2$. Combine like terms: $x - 38 = 2$"),
        ("Isolate the variable:", "$x = 2 + 38, x = 40$."),
    ),
    final_answer="40",
    seq=-1,
)


def serialize_steps(steps: Sequence[tuple[str, str]], sep: str = "\n") -> str:
    return sep.join(f"Subproblem {i}: {q}\n{a}" for i, (q, a) in enumerate(steps, start=1))


def serialize_solution(solution: StructuredSolution) -> str:
    """Canonical form: step blocks then the ``Answer:`` line."""
    final = solution.final_answer if solution.final_answer is not None else ""
    body = serialize_steps(solution.steps)
    tail = f"{ANSWER_MARKER} {final}"
    return f"{body}\n{tail}" if body else tail


def serialize_demo(entry: MetacogEntry) -> str:
    return (
        f"Example problem: {entry.problem}\n\n"
        f"Solution:\n\n"
        f"{serialize_steps(entry.steps, sep=chr(10) * 2)}\n\n"
        f"Final Solution:\n\n"
        f"{ANSWER_MARKER} {entry.final_answer}"
    )


def parse_structured(completion_text: str) -> StructuredSolution:
    """Lenient parse of ``Subproblem <n>:`` blocks and the final answer."""
    steps: list[tuple[str, str]] = []
    current_q: Optional[str] = None
    body: list[str] = []

    def close():
        nonlocal current_q, body
        if current_q is not None:
            steps.append((current_q.strip(), "\n".join(body).strip()))
        current_q, body = None, []

    for line in completion_text.splitlines():
        m = _STEP_MARKER.match(line)
        if m:
            close()
            current_q = m.group(2)
            continue
        if line.lstrip().startswith(ANSWER_MARKER) or _FINAL_SECTION.match(line):
            close()
            continue
        if current_q is not None:
            body.append(line)
    close()
    return StructuredSolution(tuple(steps), extract_answer(completion_text), completion_text)


def _read_builtin(kind: Stage) -> str:
    return resources.files(__name__).joinpath(f"{kind.value}.txt").read_text(encoding="utf-8")


class TemplateSet:
    def __init__(self, texts: dict[Stage, str]):
        missing = [k.value for k in Stage if k not in texts]
        if missing:
            raise TemplateError(f"missing templates: {', '.join(missing)}")
        for kind, text in texts.items():
            if "{problem}" not in text:
                raise TemplateError(f"{kind.value} template lacks the {{problem}} placeholder")
        if "{demo}" not in texts[Stage.DECOMPOSITION]:
            raise TemplateError("decomposition template lacks the {demo} placeholder")
        if "{prior}" not in texts[Stage.REFLECTION]:
            raise TemplateError("reflection template lacks the {prior} placeholder")
        self.texts = dict(texts)

    @classmethod
    def builtin(cls) -> "TemplateSet":
        return cls({k: _read_builtin(k) for k in Stage})

    @classmethod
    def from_dir(cls, path: str | Path) -> "TemplateSet":
        path = Path(path)
        return cls({k: (path / f"{k.value}.txt").read_text(encoding="utf-8") for k in Stage})

    def render(
        self,
        kind: Stage,
        problem: str,
        demo: Optional[MetacogEntry] = None,
        prior: Optional[StructuredSolution] = None,
    ) -> RenderedPrompt:
        kind = Stage(kind)
        values = {"problem": problem, "demo": "", "prior": ""}
        if kind is Stage.DECOMPOSITION:
            if demo is None:
                raise TemplateError("decomposition prompt needs a demonstration")
            values["demo"] = serialize_demo(demo)
        elif kind is Stage.REFLECTION:
            if prior is None:
                raise TemplateError("reflection prompt needs a prior attempt")
            values["prior"] = serialize_solution(prior)
        text = _PLACEHOLDER.sub(lambda m: values[m.group(1)], self.texts[kind])
        return RenderedPrompt(
            kind=kind,
            text=text,
            problem=problem,
            demo=demo if kind is Stage.DECOMPOSITION else None,
            prior=prior if kind is Stage.REFLECTION else None,
        )


_BUILTIN: Optional[TemplateSet] = None


def builtin_templates() -> TemplateSet:
    global _BUILTIN
    if _BUILTIN is None:
        _BUILTIN = TemplateSet.builtin()
    return _BUILTIN


def render(kind: Stage, problem: str, demo=None, prior=None, templates: Optional[TemplateSet] = None):
    return (templates or builtin_templates()).render(kind, problem, demo, prior)


def rewrite_to_direct(sample: CompletionSample, templates: Optional[TemplateSet] = None) -> tuple[str, str]:
    """Direct-template prompt and canonical target for a correct metacognitive sample."""
    if sample.reward != 1:
        raise TemplateError("only correct samples are rewritten for SFT")
    if not sample.stage.is_metacognitive:
        raise TemplateError("direct-stage samples are not rewritten for SFT")
    solution = sample.structured or parse_structured(sample.text)
    prompt = render(Stage.DIRECT, sample.problem.text, templates=templates).text
    return prompt, serialize_solution(solution)


__all__ = [
    "RenderedPrompt",
    "SEED_DEMO",
    "StructuredSolution",
    "TemplateError",
    "TemplateSet",
    "builtin_templates",
    "parse_structured",
    "render",
    "rewrite_to_direct",
    "serialize_demo",
    "serialize_solution",
]
