"""Capacity-bounded FIFO buffer of decomposition demonstrations with BM25 lookup."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional

SNAPSHOT_SCHEMA_VERSION = 1
DEFAULT_CAPACITY = 512

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


class EmptyBufferError(LookupError):
    """No demonstration to retrieve; callers fall back to the seed demonstration."""


class SnapshotParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def tokenize(text: str) -> list[str]:
    return [t for t in _NON_ALNUM.split(text.lower()) if t]


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if not self.k1 > 0:
            raise ValueError(f"k1 must be positive, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


@dataclass(frozen=True)
class MetacogEntry:
    problem: str
    steps: tuple[tuple[str, str], ...]
    final_answer: str
    seq: int = -1

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple((str(q), str(a)) for q, a in self.steps))
        if not self.steps:
            raise ValueError("a demonstration needs at least one step")

    def with_seq(self, seq: int) -> "MetacogEntry":
        return MetacogEntry(self.problem, self.steps, self.final_answer, seq)

    def to_record(self) -> dict:
        return {
            "problem": self.problem,
            "steps": [list(s) for s in self.steps],
            "final_answer": self.final_answer,
            "seq": self.seq,
        }


def idf(n_docs: int, doc_freq: int) -> float:
    return math.log((n_docs - doc_freq + 0.5) / (doc_freq + 0.5) + 1.0)


class MetacogBuffer:
    """FIFO demonstration store; document statistics are kept in step with entries.

    Scoring uses the problem text only. Entries are kept in insertion order, so
    the oldest entry is always first.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, params: Bm25Params | None = None):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.params = params or Bm25Params()
        self.next_seq = 0
        self._entries: dict[int, MetacogEntry] = {}
        self._by_problem: dict[str, int] = {}
        self._tf: dict[int, Counter] = {}
        self._len: dict[int, int] = {}
        self._postings: dict[str, set[int]] = {}
        self.doc_freq: Counter = Counter()
        self.total_len = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    @property
    def entries(self) -> list[MetacogEntry]:
        return list(self._entries.values())

    @property
    def avg_len(self) -> float:
        return self.total_len / len(self._entries) if self._entries else 0.0

    # -- mutation -----------------------------------------------------------

    def _add(self, entry: MetacogEntry) -> None:
        terms = tokenize(entry.problem)
        tf = Counter(terms)
        self._entries[entry.seq] = entry
        self._by_problem[entry.problem] = entry.seq
        self._tf[entry.seq] = tf
        self._len[entry.seq] = len(terms)
        self.total_len += len(terms)
        for term in tf:
            self.doc_freq[term] += 1
            self._postings.setdefault(term, set()).add(entry.seq)

    def _remove(self, seq: int) -> MetacogEntry:
        entry = self._entries.pop(seq)
        del self._by_problem[entry.problem]
        tf = self._tf.pop(seq)
        self.total_len -= self._len.pop(seq)
        for term in tf:
            self.doc_freq[term] -= 1
            if self.doc_freq[term] == 0:
                del self.doc_freq[term]
            bucket = self._postings[term]
            bucket.discard(seq)
            if not bucket:
                del self._postings[term]
        return entry

    def insert_if_correct(self, candidate: MetacogEntry, reward: int) -> bool:
        """Insert on reward +1 (newest duplicate wins, oldest evicted). Returns whether inserted."""
        if reward not in (-1, 1):
            raise ValueError(f"reward must be -1 or +1, got {reward}")
        if reward != 1:
            return False
        old = self._by_problem.get(candidate.problem)
        if old is not None:
            self._remove(old)
        self._add(candidate.with_seq(self.next_seq))
        self.next_seq += 1
        while len(self._entries) > self.capacity:
            self._remove(next(iter(self._entries)))
        return True

    # -- retrieval ----------------------------------------------------------

    def score(self, query: str | list[str], entry: MetacogEntry) -> float:
        if self._entries.get(entry.seq) != entry:
            raise KeyError(f"entry seq={entry.seq} is not in this buffer")
        terms = tokenize(query) if isinstance(query, str) else query
        return self._score_seq(terms, entry.seq)

    def _score_seq(self, terms: list[str], seq: int) -> float:
        k1, b = self.params.k1, self.params.b
        n_docs = len(self._entries)
        avg = self.avg_len
        tf = self._tf[seq]
        norm = k1 * (1.0 - b + b * (self._len[seq] / avg if avg > 0 else 1.0))
        total = 0.0
        for term in terms:
            f = tf.get(term, 0)
            if f == 0:
                continue
            total += idf(n_docs, self.doc_freq[term]) * (f * (k1 + 1.0)) / (f + norm)
        return total

    def retrieve_best(self, query: str) -> MetacogEntry:
        """Highest-scoring entry; ties go to the oldest (smallest seq)."""
        if not self._entries:
            raise EmptyBufferError("metacognitive buffer is empty")
        terms = tokenize(query)
        candidates: set[int] = set()
        for term in set(terms):
            candidates |= self._postings.get(term, set())
        if not candidates:
            # every score is 0.0
            return next(iter(self._entries.values()))
        best_seq, best_score = -1, -math.inf
        for seq in sorted(candidates):
            s = self._score_seq(terms, seq)
            if s > best_score:
                best_seq, best_score = seq, s
        return self._entries[best_seq]

    # -- statistics ---------------------------------------------------------

    def recompute_stats(self) -> tuple[Counter, int]:
        """Document frequencies and total length rebuilt from entries alone."""
        df: Counter = Counter()
        total = 0
        for entry in self._entries.values():
            terms = tokenize(entry.problem)
            total += len(terms)
            df.update(set(terms))
        return df, total

    # -- persistence --------------------------------------------------------

    def snapshot(self) -> bytes:
        header = {
            "type": "header",
            "schema_version": SNAPSHOT_SCHEMA_VERSION,
            "capacity": self.capacity,
            "next_seq": self.next_seq,
            "entries": len(self._entries),
            "k1": self.params.k1,
            "b": self.params.b,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(e.to_record(), sort_keys=True) for e in self._entries.values()]
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def load(cls, data: bytes) -> "MetacogBuffer":
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SnapshotParseError(f"invalid utf-8 ({exc.reason})", 1, exc.start) from exc
        lines = text.split("\n")
        if not text.endswith("\n"):
            raise SnapshotParseError("stream truncated (missing final newline)", len(lines), len(lines[-1]))
        lines = lines[:-1]
        if not lines:
            raise SnapshotParseError("missing header record", 1)
        records = []
        for i, line in enumerate(lines, start=1):
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SnapshotParseError(exc.msg, i, exc.colno) from exc
        header = records[0]
        if not isinstance(header, dict) or header.get("type") != "header":
            raise SnapshotParseError("first record is not a header", 1)
        try:
            buf = cls(int(header["capacity"]), Bm25Params(float(header["k1"]), float(header["b"])))
            expected = int(header["entries"])
            next_seq = int(header["next_seq"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotParseError(f"bad header: {exc}", 1) from exc
        if len(records) - 1 != expected:
            raise SnapshotParseError(
                f"header declares {expected} entries, found {len(records) - 1}", len(lines)
            )
        last = -1
        for i, rec in enumerate(records[1:], start=2):
            try:
                entry = MetacogEntry(
                    problem=rec["problem"],
                    steps=tuple(tuple(s) for s in rec["steps"]),
                    final_answer=rec["final_answer"],
                    seq=int(rec["seq"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise SnapshotParseError(f"bad entry: {exc}", i) from exc
            if entry.seq <= last or entry.seq >= next_seq:
                raise SnapshotParseError(f"seq {entry.seq} out of order", i)
            if entry.problem in buf._by_problem:
                raise SnapshotParseError("duplicate problem text", i)
            last = entry.seq
            buf._add(entry)
        if len(buf) > buf.capacity:
            raise SnapshotParseError("more entries than capacity", len(lines))
        buf.next_seq = next_seq
        return buf


def bm25_score(query: str, entry: MetacogEntry, buffer: MetacogBuffer) -> float:
    return buffer.score(query, entry)


def build_buffer(entries: Iterable[MetacogEntry], capacity: int = DEFAULT_CAPACITY,
                 params: Optional[Bm25Params] = None) -> MetacogBuffer:
    buf = MetacogBuffer(capacity, params)
    for e in entries:
        buf.insert_if_correct(e, 1)
    return buf
