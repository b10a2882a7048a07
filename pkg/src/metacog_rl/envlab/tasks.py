"""Synthetic chain-arithmetic tasks with exact oracles."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from metacog_rl.templates import StructuredSolution
from metacog_rl.types import Problem
from metacog_rl.verify import AnswerKey

OPERATIONS = ("add", "sub", "mul")
SYMBOL = {"add": "+", "sub": "-", "mul": "*"}
_OP_OF = {v: k for k, v in SYMBOL.items()}


class TaskSpecError(ValueError):
    pass


class OverflowRetryError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainTaskSpec:
    """Chain of ``horizon`` operations split into ``sub_count`` equal sub-problems.

    ``modulus`` (optional) reduces every intermediate value; the softmax policy
    acts only on modular chains, where each value is one token.
    """

    horizon: int = 12
    sub_count: int = 3
    gamma: float = 0.5
    operand_min: int = 0
    operand_max: int = 4
    operations: tuple[str, ...] = OPERATIONS
    modulus: Optional[int] = 5
    seed: int = 0
    max_abs: int = 10**12
    max_retries: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "operations", tuple(self.operations))
        if self.horizon < 1:
            raise TaskSpecError(f"horizon: must be positive, got {self.horizon}")
        if self.sub_count < 1 or self.horizon % self.sub_count:
            raise TaskSpecError(f"sub_count: must be a positive divisor of horizon {self.horizon}, got {self.sub_count}")
        if not 0.0 < self.gamma <= 1.0:
            raise TaskSpecError(f"gamma: must lie in (0, 1), got {self.gamma}")
        if self.operand_min > self.operand_max:
            raise TaskSpecError("operand_min: must not exceed operand_max")
        if not self.operations or any(op not in OPERATIONS for op in self.operations):
            raise TaskSpecError(f"operations: must be a nonempty subset of {OPERATIONS}, got {self.operations}")
        if len(set(self.operations)) != len(self.operations):
            raise TaskSpecError("operations: duplicates are not allowed")
        if self.modulus is not None and self.modulus < 2:
            raise TaskSpecError(f"modulus: must be at least 2, got {self.modulus}")

    @property
    def sub_horizon(self) -> int:
        return self.horizon // self.sub_count

    @property
    def reflect_horizon(self) -> int:
        return max(1, math.ceil(self.gamma * self.sub_horizon - 1e-12))

    @property
    def is_valid(self) -> bool:
        """Horizon ordering H'' < H' < H with gamma strictly inside (0, 1)."""
        return self.gamma < 1.0 and self.reflect_horizon < self.sub_horizon < self.horizon

    def validate(self) -> "ChainTaskSpec":
        if not self.is_valid:
            raise TaskSpecError(
                f"degenerate horizons: H={self.horizon}, H'={self.sub_horizon}, H''={self.reflect_horizon} "
                "(need H'' < H' < H and gamma < 1)"
            )
        return self

    @property
    def n_operands(self) -> int:
        return self.operand_max - self.operand_min + 1

    def with_(self, **kw) -> "ChainTaskSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class SyntheticTask:
    problem: Problem
    ground_truth: AnswerKey
    decomposition: StructuredSolution
    start: int
    steps: tuple[tuple[str, int], ...] = field(repr=False)
    modulus: Optional[int] = None


def _fmt(x: int) -> str:
    return f"({x})" if x < 0 else str(x)


def chain_expression(start: int, steps: Sequence[tuple[str, int]]) -> str:
    expr = _fmt(start)
    for i, (op, x) in enumerate(steps):
        expr = f"{expr}{SYMBOL[op]}{_fmt(x)}" if i == 0 else f"({expr}){SYMBOL[op]}{_fmt(x)}"
    return expr


def chain_text(start: int, steps: Sequence[tuple[str, int]], modulus: Optional[int]) -> str:
    expr = chain_expression(start, steps)
    return f"{expr} mod {modulus}" if modulus is not None else expr


def apply_op(op: str, a: int, b: int, modulus: Optional[int] = None) -> int:
    if op == "add":
        v = a + b
    elif op == "sub":
        v = a - b
    elif op == "mul":
        v = a * b
    else:
        raise ValueError(f"unknown operation {op!r}")
    return v % modulus if modulus is not None else v


_MOD_SUFFIX = re.compile(r"^(.*) mod (\d+)$")
_NUM = re.compile(r"\(-\d+\)|\d+")


def parse_chain(text: str) -> Optional[tuple[int, tuple[tuple[str, int], ...], Optional[int]]]:
    """Inverse of :func:`chain_text`; None when ``text`` is not a chain expression."""
    s = text.strip()
    modulus = None
    m = _MOD_SUFFIX.match(s)
    if m:
        s, modulus = m.group(1), int(m.group(2))
    n_open = len(s) - len(s.lstrip("("))
    if s[n_open : n_open + 1] == "-":
        n_open -= 1  # that paren wraps a negative start
    pos = n_open

    def number():
        nonlocal pos
        mm = _NUM.match(s, pos)
        if not mm:
            return None
        pos = mm.end()
        tok = mm.group(0)
        return -int(tok[2:-1]) if tok.startswith("(") else int(tok)

    start = number()
    if start is None:
        return None
    steps = []
    while pos < len(s):
        if steps:
            if s[pos] != ")":
                return None
            pos += 1
        if pos >= len(s) or s[pos] not in _OP_OF:
            return None
        op = _OP_OF[s[pos]]
        pos += 1
        x = number()
        if x is None:
            return None
        steps.append((op, x))
    if not steps or len(steps) != n_open + 1:
        return None
    return start, tuple(steps), modulus


def evaluate_chain(start: int, steps: Sequence[tuple[str, int]], modulus: Optional[int] = None) -> list[int]:
    """All intermediate values, starting value first."""
    vals = [start % modulus if modulus is not None else start]
    for op, x in steps:
        vals.append(apply_op(op, vals[-1], x, modulus))
    return vals


def oracle_decomposition(spec: ChainTaskSpec, start: int, steps: Sequence[tuple[str, int]]) -> StructuredSolution:
    vals = evaluate_chain(start, steps, spec.modulus)
    h = spec.sub_horizon
    out = []
    for i in range(spec.sub_count):
        block = steps[i * h : (i + 1) * h]
        first = start if i == 0 else vals[i * h]
        out.append((chain_text(first, block, spec.modulus), str(vals[(i + 1) * h])))
    return StructuredSolution(tuple(out), str(vals[-1]), "")


def _within(spec: ChainTaskSpec, vals: Sequence[int]) -> bool:
    return all(abs(v) <= spec.max_abs for v in vals)


def sample_chain(spec: ChainTaskSpec, rng: np.random.Generator) -> tuple[int, tuple[tuple[str, int], ...]]:
    for _ in range(spec.max_retries):
        start = int(rng.integers(spec.operand_min, spec.operand_max + 1))
        ops = rng.integers(0, len(spec.operations), size=spec.horizon)
        xs = rng.integers(spec.operand_min, spec.operand_max + 1, size=spec.horizon)
        steps = tuple((spec.operations[int(o)], int(x)) for o, x in zip(ops, xs))
        if _within(spec, evaluate_chain(start, steps, spec.modulus)):
            return start, steps
    raise OverflowRetryError(f"no chain within |value| <= {spec.max_abs} after {spec.max_retries} draws")


def make_task(spec: ChainTaskSpec, start: int, steps: Sequence[tuple[str, int]], task_id: str,
              difficulty: str = "default") -> SyntheticTask:
    steps = tuple(steps)
    answer = str(evaluate_chain(start, steps, spec.modulus)[-1])
    problem = Problem(id=task_id, text=chain_text(start, steps, spec.modulus), answer=answer, difficulty=difficulty)
    return SyntheticTask(
        problem=problem,
        ground_truth=AnswerKey.from_raw(answer),
        decomposition=oracle_decomposition(spec, start, steps),
        start=start,
        steps=steps,
        modulus=spec.modulus,
    )


def generate_tasks(spec: ChainTaskSpec, count: int, prefix: str = "task", offset: int = 0) -> list[SyntheticTask]:
    rng = np.random.default_rng([spec.seed, offset])
    return [make_task(spec, *sample_chain(spec, rng), task_id=f"{prefix}-{offset + i}") for i in range(count)]


def oracle_solve(task: SyntheticTask) -> AnswerKey:
    """Re-parse the problem text and evaluate it exactly."""
    parsed = parse_chain(task.problem.text)
    if parsed is None:
        raise ValueError(f"not a chain problem: {task.problem.text!r}")
    start, steps, modulus = parsed
    return AnswerKey.from_raw(str(evaluate_chain(start, steps, modulus)[-1]))
