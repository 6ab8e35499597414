"""Rank library prompts against a target task and build transfer plans."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyLibraryError,
    EmptyListError,
    EmptySizesError,
    InvalidInputError,
    KOutOfRangeError,
    MissingDatasetError,
    ShapeMismatchError,
)
from .library import LibraryEntry, LibraryManifest
from .prompt import Prompt, SimilarityMetric, TaskEmbedding, similarity

__all__ = [
    "DEFAULT_MIXTURE_CAP",
    "RankedSource",
    "MixtureComponent",
    "MixtureSpec",
    "rank_sources",
    "best_of_top_k_plan",
    "alpha_weights",
    "weighted_average_prompt",
    "mixture_rates",
    "compose_mixture",
    "top_k_tasks",
]

DEFAULT_MIXTURE_CAP = 2**19


@dataclass(frozen=True)
class RankedSource:
    rank: int
    entry: LibraryEntry
    similarity: float


def rank_sources(target: TaskEmbedding, library: LibraryManifest, metric) -> list[RankedSource]:
    """Score every library entry against ``target``, most similar first.

    Ties are broken by task name, then run seed, so the order is fully
    deterministic.
    """
    metric = SimilarityMetric.parse(metric)
    if len(library) == 0:
        raise EmptyLibraryError("cannot rank against an empty library")
    if tuple(target.shape) != (library.L, library.E):
        raise ShapeMismatchError(f"target shape {target.shape} != library shape {(library.L, library.E)}")
    scored = [(similarity(target, library.embedding(e), metric), e) for e in library.entries]
    scored.sort(key=lambda se: (-se[0], se[1].task_name, se[1].run_seed))
    return [RankedSource(rank=i + 1, entry=e, similarity=s) for i, (s, e) in enumerate(scored)]


def best_of_top_k_plan(ranked: Sequence[RankedSource], k: int) -> list[LibraryEntry]:
    """The ``k`` most similar entries, each to be used as a separate initialization.

    The caller tunes the target once per candidate and keeps the best
    validation result. With ``k == len(ranked)`` this is exhaustive search.
    """
    if not 1 <= k <= len(ranked):
        raise KOutOfRangeError(f"k={k} outside [1, {len(ranked)}]")
    return [r.entry for r in ranked[:k]]


def top_k_tasks(ranked: Sequence[RankedSource], k: int) -> list[str]:
    """Distinct task names among the top-k prompts, in rank order."""
    tasks: list[str] = []
    for entry in best_of_top_k_plan(ranked, k):
        if entry.task_name not in tasks:
            tasks.append(entry.task_name)
    return tasks


def alpha_weights(similarities: Sequence[float]) -> np.ndarray:
    """Normalized interpolation weights from similarity scores.

    Negative similarities are floored at zero. If nothing positive remains
    the weights fall back to uniform and a warning is emitted.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 1 or sims.size == 0:
        raise EmptyListError("need at least one similarity")
    if not np.all(np.isfinite(sims)):
        raise InvalidInputError("similarities must be finite")
    floored = np.maximum(sims, 0.0)
    total = floored.sum()
    if total <= 0.0:
        warnings.warn("all similarities are <= 0; using uniform weights", RuntimeWarning, stacklevel=2)
        return np.full(sims.size, 1.0 / sims.size)
    return floored / total


def weighted_average_prompt(top: Sequence[tuple[Prompt, float]]) -> Prompt:
    """Interpolate prompts with similarity-proportional weights."""
    top = list(top)
    if not top:
        raise EmptyListError("weighted average of an empty prompt list")
    shape = top[0][0].shape
    for p, _ in top:
        if p.shape != shape:
            raise ShapeMismatchError(f"prompt shapes differ: {shape} vs {p.shape}")
    alphas = alpha_weights([s for _, s in top])
    out = np.zeros(shape)
    for a, (p, _) in zip(alphas, top):
        out += a * p.tokens
    first = top[0][0]
    return Prompt(out, task_name=first.task_name if len(top) == 1 else "weighted-average", run_seed=first.run_seed)


@dataclass(frozen=True)
class MixtureComponent:
    dataset: str
    examples: int
    rate: float


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[MixtureComponent, ...]
    cap: int

    @property
    def rates(self) -> dict[str, float]:
        return {c.dataset: c.rate for c in self.components}


def mixture_rates(sizes, cap: int = DEFAULT_MIXTURE_CAP) -> MixtureSpec:
    """Examples-proportional mixing: rate_m = min(e_m, K) / sum_n min(e_n, K)."""
    if isinstance(sizes, Mapping):
        sizes = list(sizes.items())
    sizes = [(str(name), int(n)) for name, n in sizes]
    if not sizes:
        raise EmptySizesError("mixture needs at least one dataset")
    if cap < 1:
        raise InvalidInputError(f"cap must be >= 1, got {cap}")
    names = [name for name, _ in sizes]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"duplicate dataset ids in mixture: {names}")
    for name, n in sizes:
        if n < 1:
            raise InvalidInputError(f"dataset {name!r} has {n} examples; need at least 1")
    capped = [min(n, cap) for _, n in sizes]
    total = sum(capped)  # exact integer arithmetic
    comps = tuple(MixtureComponent(name, n, c / total) for (name, n), c in zip(sizes, capped))
    return MixtureSpec(components=comps, cap=cap)


def compose_mixture(spec: MixtureSpec, datasets: Mapping[str, Sequence], total_examples: int, seed: int) -> Iterator:
    """Yield ``total_examples`` examples drawn from the mixture.

    Each draw picks component ``m`` with probability ``rate_m``; inside a
    component examples are visited in a seeded shuffled order that is
    reshuffled after every full pass.
    """
    if total_examples < 1:
        raise InvalidInputError("total_examples must be >= 1")
    for c in spec.components:
        if c.dataset not in datasets:
            raise MissingDatasetError(f"no dataset stream for mixture component {c.dataset!r}")
        if len(datasets[c.dataset]) == 0:
            raise InvalidInputError(f"dataset {c.dataset!r} is empty")
    return _mixture_stream(spec, datasets, total_examples, seed)


def _mixture_stream(spec, datasets, total_examples, seed):
    rng = np.random.default_rng(seed)
    names = [c.dataset for c in spec.components]
    cdf = np.cumsum([c.rate for c in spec.components])
    cdf[-1] = 1.0
    orders: dict[str, np.ndarray] = {}
    cursors = {name: 0 for name in names}
    for _ in range(total_examples):
        m = int(np.searchsorted(cdf, rng.random(), side="right")) if len(names) > 1 else 0
        name = names[m]
        data = datasets[name]
        if name not in orders or cursors[name] >= len(data):
            orders[name] = rng.permutation(len(data))
            cursors[name] = 0
        idx = orders[name][cursors[name]]
        cursors[name] += 1
        yield data[int(idx)]
