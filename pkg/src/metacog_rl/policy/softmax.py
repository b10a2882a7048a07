"""Tabular softmax sequence policy with exact log-probability gradients."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from metacog_rl.policy.base import Capabilities, PolicyBackend
from metacog_rl.templates import RenderedPrompt
from metacog_rl.types import CompletionSample, Stage


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


class SoftmaxSequencePolicy:
    """Logits indexed by context: a per-position cue crossed with the previous token.

    With ``context_order=0`` the previous token is ignored. Row layout is
    ``cue * n_prev + prev`` where ``prev == vocab_size`` marks beginning of
    sequence. Logits may be ``-inf`` (probability zero) as long as every row
    keeps one finite entry.
    """

    def __init__(self, vocab_size: int, context_order: int = 1, n_cues: int = 1,
                 params: Optional[np.ndarray] = None, rng_seed: int = 0):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if context_order not in (0, 1):
            raise ValueError("context_order must be 0 or 1")
        self.vocab_size = vocab_size
        self.context_order = context_order
        self.n_cues = n_cues
        self.n_prev = 1 if context_order == 0 else vocab_size + 1
        self.bos = vocab_size
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        shape = (n_cues * self.n_prev, vocab_size)
        if params is None:
            params = np.zeros(shape)
        params = np.array(params, dtype=np.float64)
        if params.shape != shape:
            raise ValueError(f"params must have shape {shape}, got {params.shape}")
        self._params = params
        self._table: Optional[np.ndarray] = None

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        if value.shape != self._params.shape:
            raise ValueError(f"params must have shape {self._params.shape}, got {value.shape}")
        self._params = value
        self._table = None

    @property
    def n_contexts(self) -> int:
        return self._params.shape[0]

    @property
    def num_params(self) -> int:
        return self._params.size

    def log_table(self) -> np.ndarray:
        if self._table is None:
            self._table = log_softmax(self._params)
        return self._table

    def prob_table(self) -> np.ndarray:
        return np.exp(self.log_table())

    def context_index(self, cues, prev):
        cues = np.asarray(cues)
        if self.context_order == 0:
            return cues * 1
        return cues * self.n_prev + np.asarray(prev)

    def contexts(self, tokens: Sequence[int], cues, first_prev: int = -1) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        prev = np.empty_like(tokens)
        if tokens.size:
            prev[0] = self.bos if first_prev < 0 else first_prev
            prev[1:] = tokens[:-1]
        return self.context_index(np.asarray(cues, dtype=np.int64), prev)

    def log_probs(self, tokens: Sequence[int], cues, first_prev: int = -1) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        return self.log_table()[self.contexts(tokens, cues, first_prev), tokens]

    def sample(self, cues, first_prev: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` sequences, one token per cue; returns tokens and their log-probs."""
        cues = np.asarray(cues, dtype=np.int64)
        table = self.log_table()
        probs = np.exp(table)
        length = cues.size
        tokens = np.empty((n, length), dtype=np.int64)
        logp = np.empty((n, length))
        prev = np.full(n, self.bos if first_prev < 0 else first_prev, dtype=np.int64)
        for t in range(length):
            ctx = self.context_index(np.full(n, cues[t]), prev)
            cdf = np.cumsum(probs[ctx], axis=1)
            u = self.rng.random(n) * cdf[:, -1]
            tok = np.argmax(cdf > u[:, None], axis=1)
            tokens[:, t] = tok
            logp[:, t] = table[ctx, tok]
            prev = tok
        return tokens, logp

    def grad_log_probs(self, tokens: Sequence[int], cues, first_prev: int, weights) -> np.ndarray:
        """Gradient of ``sum_t weights[t] * log pi(token_t | context_t)`` w.r.t. params."""
        tokens = np.asarray(tokens, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        ctx = self.contexts(tokens, cues, first_prev)
        grad = np.zeros_like(self._params)
        probs = self.prob_table()
        np.add.at(grad, ctx, -weights[:, None] * probs[ctx])
        np.add.at(grad, (ctx, tokens), weights)
        return grad


class SoftmaxBackend(PolicyBackend):
    """Text-facing wrapper: a codec maps prompts to cues and tokens to completion text."""

    capabilities = Capabilities(can_sample=True, can_score=True, can_update=True)

    def __init__(self, policy: SoftmaxSequencePolicy, codec):
        super().__init__()
        if codec.vocab_size != policy.vocab_size or codec.n_cues != policy.n_cues:
            raise ValueError("codec and policy disagree on vocabulary or cue count")
        self.policy = policy
        self.codec = codec

    def sample_group(self, prompt: RenderedPrompt, group_size: int) -> list[CompletionSample]:
        self._count(prompt, group_size)
        cues, first_prev = self.codec.layout(prompt.text)
        tokens, logp = self.policy.sample(cues, first_prev, group_size)
        out = []
        for i in range(group_size):
            toks = tuple(int(t) for t in tokens[i])
            out.append(CompletionSample(
                stage=Stage(prompt.kind), problem=None, prompt=prompt.text,
                text=self.codec.decode(prompt.text, toks), tokens=toks, logprobs=logp[i].copy(),
            ))
        return out

    def score_tokens(self, prompt: str, tokens: Sequence[int]) -> np.ndarray:
        cues, first_prev = self.codec.layout(prompt, len(tokens))
        return self.policy.log_probs(tokens, cues, first_prev)

    def logprob_grad(self, prompt: str, tokens: Sequence[int], weights) -> np.ndarray:
        cues, first_prev = self.codec.layout(prompt, len(tokens))
        return self.policy.grad_log_probs(tokens, cues, first_prev, weights).ravel()

    def encode(self, prompt: str, text: str) -> tuple[int, ...]:
        return self.codec.encode(prompt, text)

    @property
    def num_params(self) -> int:
        return self.policy.num_params

    def get_params(self) -> np.ndarray:
        return self.policy.params.ravel().copy()

    def set_params(self, flat: np.ndarray) -> None:
        self.policy.params = np.asarray(flat, dtype=np.float64).reshape(self.policy.params.shape)

    def apply_gradient(self, grad: np.ndarray, learning_rate: float) -> "SoftmaxBackend":
        grad = np.asarray(grad, dtype=np.float64).ravel()
        if grad.size != self.num_params:
            raise ValueError(f"gradient has {grad.size} entries, policy has {self.num_params}")
        if learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not np.all(np.isfinite(grad)):
            raise ValueError("gradient has non-finite entries")
        self.set_params(self.get_params() - learning_rate * grad)
        return self
