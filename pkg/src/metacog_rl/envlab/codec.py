"""Token codec that lets the softmax policy read chain prompts and write solutions.

A completion is one value token per operation. The codec finds the target
problem (the last line of the prompt holding a chain expression), gives each
position a cue for its (operation, operand) pair, and renders the
tokens as canonical ``Subproblem i:`` text ending in an ``Answer:`` line.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from metacog_rl.envlab.tasks import SYMBOL, ChainTaskSpec, _fmt, parse_chain
from metacog_rl.templates import StructuredSolution, parse_structured, serialize_solution


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class ChainPrompt:
    start: int
    steps: tuple[tuple[str, int], ...]
    cues: np.ndarray
    first_prev: int


class ChainCodec:
    def __init__(self, spec: ChainTaskSpec):
        if spec.modulus is None:
            raise CodecError("the softmax policy acts only on modular chains (set a modulus)")
        self.spec = spec
        self.modulus = spec.modulus
        self.vocab_size = spec.modulus
        self.n_cues = len(spec.operations) * spec.n_operands
        self._op_index = {op: i for i, op in enumerate(spec.operations)}
        self._read = lru_cache(maxsize=8192)(self._read_uncached)

    def cue(self, op: str, operand: int) -> int:
        return self._op_index[op] * self.spec.n_operands + (operand - self.spec.operand_min)

    def _accepts(self, parsed) -> bool:
        _, steps, modulus = parsed
        if modulus != self.modulus:
            return False
        lo, hi = self.spec.operand_min, self.spec.operand_max
        return all(op in self._op_index and lo <= x <= hi for op, x in steps)

    def _read_uncached(self, prompt_text: str) -> ChainPrompt:
        for line in reversed(prompt_text.splitlines()):
            parsed = parse_chain(line)
            if parsed is not None and self._accepts(parsed):
                start, steps, _ = parsed
                cues = np.array([self.cue(op, x) for op, x in steps], dtype=np.int64)
                return ChainPrompt(start, steps, cues, start % self.modulus)
        raise CodecError("no chain problem found in prompt")

    def read(self, prompt_text: str) -> ChainPrompt:
        return self._read(prompt_text)

    def layout(self, prompt_text: str, n_tokens: int | None = None) -> tuple[np.ndarray, int]:
        """Per-position cues and the token preceding the completion."""
        ctx = self.read(prompt_text)
        if n_tokens is not None and n_tokens != len(ctx.cues):
            raise CodecError(f"completion has {n_tokens} tokens, prompt needs {len(ctx.cues)}")
        return ctx.cues, ctx.first_prev

    def _step_question(self, prev_text: str, op: str, x: int) -> str:
        return f"{prev_text}{SYMBOL[op]}{_fmt(x)} mod {self.modulus}"

    def solution(self, prompt_text: str, tokens) -> StructuredSolution:
        ctx = self.read(prompt_text)
        steps = []
        prev_text = _fmt(ctx.start)
        for (op, x), tok in zip(ctx.steps, tokens):
            steps.append((self._step_question(prev_text, op, x), str(int(tok))))
            prev_text = str(int(tok))
        final = steps[-1][1] if steps else None
        return StructuredSolution(tuple(steps), final, "")

    def decode(self, prompt_text: str, tokens) -> str:
        return serialize_solution(self.solution(prompt_text, tokens))

    def encode(self, prompt_text: str, text: str) -> tuple[int, ...]:
        """Tokens whose decoding is ``text``; CodecError for anything else."""
        ctx = self.read(prompt_text)
        parsed = parse_structured(text)
        if len(parsed.steps) != len(ctx.steps):
            raise CodecError(f"expected {len(ctx.steps)} steps, found {len(parsed.steps)}")
        tokens = []
        for _, a in parsed.steps:
            if not (a.isascii() and a.isdigit()) or int(a) >= self.modulus:
                raise CodecError(f"step answer {a!r} is not a value token")
            tokens.append(int(a))
        if self.decode(prompt_text, tokens) != text:
            raise CodecError("text is not in canonical solution form for this prompt")
        return tuple(tokens)


class CharCodec:
    """Fixed-length completions over a character alphabet; prompts carry no cues."""

    def __init__(self, alphabet: str, length: int):
        if len(set(alphabet)) != len(alphabet) or not alphabet:
            raise CodecError("alphabet must be nonempty with distinct characters")
        self.alphabet = alphabet
        self.length = length
        self.vocab_size = len(alphabet)
        self.n_cues = 1
        self._index = {c: i for i, c in enumerate(alphabet)}

    def layout(self, prompt_text: str, n_tokens: int | None = None) -> tuple[np.ndarray, int]:
        return np.zeros(self.length if n_tokens is None else n_tokens, dtype=np.int64), -1

    def decode(self, prompt_text: str, tokens) -> str:
        return "".join(self.alphabet[int(t)] for t in tokens)

    def encode(self, prompt_text: str, text: str) -> tuple[int, ...]:
        try:
            return tuple(self._index[c] for c in text)
        except KeyError as exc:
            raise CodecError(f"character {exc.args[0]!r} not in alphabet") from exc
