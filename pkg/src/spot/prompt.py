"""Soft prompt matrices and task-similarity metrics.

A prompt is an ``L x E`` matrix of continuous token embeddings. A task
embedding is the same matrix captured at a fixed, early training step and is
used as a key when looking up related source tasks.

Two similarity metrics are provided:

* ``AVG_TOKENS``: cosine similarity between the mean-pooled rows.
* ``PER_TOKEN``: mean cosine similarity over every pair of rows.

All arithmetic is done in float64 with a fixed (row-major, ascending index)
summation order, so results are reproducible bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyRunListError,
    InvalidInputError,
    ShapeMismatchError,
    ZeroNormError,
)

__all__ = [
    "DEFAULT_PROMPT_LENGTH",
    "Prompt",
    "TaskEmbedding",
    "SimilarityMetric",
    "mean_pool",
    "cosine",
    "sim_avg_tokens",
    "sim_per_token",
    "similarity",
    "cross_run_similarity",
]

DEFAULT_PROMPT_LENGTH = 100


def _as_tokens(tokens) -> np.ndarray:
    arr = np.array(tokens, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise InvalidInputError(f"prompt tokens must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"prompt must have L >= 1 and E >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("prompt contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Prompt:
    """An immutable ``L x E`` soft prompt."""

    tokens: np.ndarray
    task_name: str = ""
    run_seed: int = 0
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", _as_tokens(self.tokens))
        if self.run_seed < 0 or self.step < 0:
            raise InvalidInputError("run_seed and step must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self.task_name == other.task_name
            and self.run_seed == other.run_seed
            and self.step == other.step
            and self.tokens.shape == other.tokens.shape
            and np.array_equal(self.tokens, other.tokens)
        )

    __hash__ = None

    def with_tokens(self, tokens, **changes) -> "Prompt":
        fields = dict(task_name=self.task_name, run_seed=self.run_seed, step=self.step)
        fields.update(changes)
        return Prompt(tokens, **fields)

    def as_embedding(self, embed_step: int | None = None) -> "TaskEmbedding":
        embed_step = self.step if embed_step is None else embed_step
        return TaskEmbedding(self.tokens, self.task_name, self.run_seed, self.step, embed_step)


@dataclass(frozen=True, eq=False)
class TaskEmbedding(Prompt):
    """A prompt snapshot taken at ``embed_step``, used as a task key."""

    embed_step: int = field(default=0)

    def __eq__(self, other):
        base = Prompt.__eq__(self, other)
        if base is NotImplemented:
            return base
        return base and self.embed_step == other.embed_step

    __hash__ = None


class SimilarityMetric(enum.Enum):
    AVG_TOKENS = "avg"
    PER_TOKEN = "per-token"

    @classmethod
    def parse(cls, value) -> "SimilarityMetric":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if key in (member.value, member.name.lower().replace("_", "-")):
                return member
        raise InvalidInputError(f"unknown similarity metric {value!r}; expected 'avg' or 'per-token'")


def _tokens_of(p) -> np.ndarray:
    if isinstance(p, Prompt):
        return p.tokens
    return _as_tokens(p)


def mean_pool(p) -> np.ndarray:
    """Column means of the prompt rows: a vector of length ``E``."""
    tokens = _tokens_of(p)
    total = np.zeros(tokens.shape[1], dtype=np.float64)
    for row in tokens:
        total += row
    return total / tokens.shape[0]


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(np.dot(v, v)))


def cosine(u, v) -> float:
    """Cosine similarity of two vectors, clamped to ``[-1, 1]``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeMismatchError(f"cosine needs two vectors of equal length, got {u.shape} and {v.shape}")
    nu, nv = _norm(u), _norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity is undefined for a zero vector")
    value = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, value))


def _check_shapes(e1, e2):
    a, b = _tokens_of(e1), _tokens_of(e2)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return a, b


def sim_avg_tokens(e1, e2) -> float:
    """Cosine similarity of the average tokens of two embeddings."""
    a, b = _check_shapes(e1, e2)
    return cosine(mean_pool(a), mean_pool(b))


def _unit_rows(tokens: np.ndarray, which: str) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", tokens, tokens))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        i = int(zero[0])
        raise ZeroNormError(f"row {i} of the {which} embedding has zero norm", row=i)
    return tokens / norms[:, None]


def sim_per_token(e1, e2) -> float:
    """Average cosine similarity over all ``L*L`` prompt-token pairs.

    The result is symmetric. Note that ``sim_per_token(e, e)`` is below 1
    unless every row of ``e`` points in the same direction, because the
    cross-row pairs are included.
    """
    a, b = _check_shapes(e1, e2)
    ua, ub = _unit_rows(a, "first"), _unit_rows(b, "second")
    # Sum of pairwise cosines == dot product of the summed unit rows.
    sa = np.zeros(a.shape[1])
    sb = np.zeros(b.shape[1])
    for row in ua:
        sa += row
    for row in ub:
        sb += row
    total = float(np.dot(sa, sb))
    value = total / (a.shape[0] * a.shape[0])
    return min(1.0, max(-1.0, value))


def similarity(e1, e2, metric: SimilarityMetric) -> float:
    metric = SimilarityMetric.parse(metric)
    if metric is SimilarityMetric.AVG_TOKENS:
        return sim_avg_tokens(e1, e2)
    return sim_per_token(e1, e2)


def cross_run_similarity(runs1, runs2, metric: SimilarityMetric) -> float:
    """Mean similarity over every ordered pair of runs.

    With three prompt tuning runs per task this averages 9 combinations.
    """
    runs1, runs2 = list(runs1), list(runs2)
    if not runs1 or not runs2:
        raise EmptyRunListError("cross-run similarity needs at least one run on each side")
    shape = _tokens_of(runs1[0]).shape
    for e in runs1 + runs2:
        if _tokens_of(e).shape != shape:
            raise ShapeMismatchError(f"run shapes differ: {shape} vs {_tokens_of(e).shape}")
    total = 0.0
    for e1 in runs1:
        for e2 in runs2:
            total += similarity(e1, e2, metric)
    return total / (len(runs1) * len(runs2))
