"""A desk-scale frozen classifier and a prompt-only gradient descent loop.

The model mean-pools the prompt rows together with the embedded input tokens
and applies a frozen linear head. Only the prompt is ever updated.

Toy tasks are keyword-indicator problems. A *family* assigns every vocabulary
token to one class through a family-specific offset on the frozen token
scores; a task samples sequences that lean towards one class's keywords and
labels each sequence by the class with the largest keyword mass (the
family-adjusted frozen scores summed over its tokens). Tasks in the same family
share the keyword rule and differ only in their sampling seed.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyBatchError,
    EmptySplitError,
    InvalidInputError,
    NoCheckpointsError,
    StepNotCheckpointedError,
    TokenIdOutOfRange,
    TopNOutOfRangeError,
)
from .prompt import Prompt, TaskEmbedding

__all__ = [
    "VOCAB_SAMPLED",
    "FrozenToyModel",
    "TaskSpec",
    "ToyTask",
    "Checkpoint",
    "TuningRun",
    "make_task",
    "mix_tasks",
    "init_prompt_from_vocab",
    "forward",
    "prompt_gradient",
    "tune",
    "evaluate",
    "select_best_checkpoint",
    "extract_task_embedding",
]

VOCAB_SAMPLED = "vocab"


class FrozenToyModel:
    """Frozen token table and linear classification head.

    Parameter arrays are made read-only on construction; use :meth:`seeded`
    to draw them from a seed.
    """

    def __init__(self, token_table, head_weights, head_bias, seed: int = 0):
        token_table = np.array(token_table, dtype=np.float64)
        head_weights = np.array(head_weights, dtype=np.float64)
        head_bias = np.array(head_bias, dtype=np.float64)
        if token_table.ndim != 2 or min(token_table.shape) < 1:
            raise InvalidInputError(f"token_table must be a nonempty V x E matrix, got {token_table.shape}")
        E = token_table.shape[1]
        if head_weights.ndim != 2 or head_weights.shape[1] != E or head_weights.shape[0] < 1:
            raise InvalidInputError(f"head_weights must be C x {E}, got {head_weights.shape}")
        if head_bias.shape != (head_weights.shape[0],):
            raise InvalidInputError(f"head_bias must have length {head_weights.shape[0]}, got {head_bias.shape}")
        for arr in (token_table, head_weights, head_bias):
            arr.flags.writeable = False
        self.token_table = token_table
        self.head_weights = head_weights
        self.head_bias = head_bias
        self.seed = seed

    @classmethod
    def seeded(
        cls,
        vocab_size: int,
        embed_dim: int,
        num_classes: int,
        seed: int = 0,
        token_scale: float = 0.5,
        head_scale: float = 4.0,
    ) -> "FrozenToyModel":
        if min(vocab_size, embed_dim, num_classes) < 1:
            raise InvalidInputError("vocab_size, embed_dim and num_classes must be positive")
        rng = np.random.default_rng(seed)
        table = rng.normal(0.0, token_scale, size=(vocab_size, embed_dim))
        weights = rng.normal(0.0, head_scale, size=(num_classes, embed_dim))
        return cls(table, weights, np.zeros(num_classes), seed=seed)

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.token_table.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_weights.shape[0]

    def fingerprint(self) -> str:
        """SHA-256 over every frozen parameter."""
        h = hashlib.sha256()
        for arr in (self.token_table, self.head_weights, self.head_bias):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


# --- tasks --------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    """JSON-serializable definition of a toy task."""

    name: str
    family: str
    rule_seed: int
    vocab_size: int
    num_classes: int
    train_size: int = 512
    validation_size: int = 256
    seq_len: int = 16
    keyword_rate: float = 0.3
    family_scale: float = 2.0

    @classmethod
    def from_json(cls, raw: dict, vocab_size: int | None = None, num_classes: int | None = None) -> "TaskSpec":
        if not isinstance(raw, dict):
            raise ConfigError("task definition must be an object")
        raw = dict(raw)
        if vocab_size is not None:
            raw.setdefault("vocab_size", vocab_size)
        if num_classes is not None:
            raw.setdefault("num_classes", num_classes)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"task {raw.get('name')!r}: unknown fields {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"task definition incomplete: {exc}") from exc

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ToyTask:
    name: str
    family: str
    rule_seed: int
    train: tuple
    validation: tuple
    num_classes: int

    @property
    def examples(self) -> tuple:
        return self.train + self.validation


@dataclass(frozen=True, eq=False)
class FamilyRule:
    """Keyword assignment shared by every task of one family.

    ``offset`` is a per-class shift on the frozen token scores; ``owner[v]``
    is the class whose keyword set contains token ``v``.
    """

    family: str
    offset: np.ndarray
    owner: np.ndarray
    scores: np.ndarray

    def keyword_mass(self, ids) -> np.ndarray:
        """Per-class keyword evidence of a sequence: summed adjusted scores."""
        return (self.scores[ids] + self.offset).sum(axis=0)


def family_rule(model: FrozenToyModel, family: str, family_scale: float = 2.0) -> FamilyRule:
    """Draw the keyword rule of ``family``.

    Tokens are assigned to the argmax of their frozen head scores plus a
    family offset; the offset is redrawn until every class owns at least
    ``V / (4C)`` tokens.
    """
    fam_seed = zlib.crc32(family.encode("utf-8"))
    rng = np.random.default_rng([model.seed, fam_seed])
    scores = model.token_table @ model.head_weights.T
    spread = float(scores.std()) or 1.0
    min_size = max(1, model.vocab_size // (4 * model.num_classes))
    for _ in range(1000):
        offset = rng.normal(0.0, family_scale * spread, size=model.num_classes)
        owner = np.argmax(scores + offset, axis=1)
        counts = np.bincount(owner, minlength=model.num_classes)
        if counts.min() >= min_size:
            return FamilyRule(family, offset, owner, scores)
    raise ConfigError(f"could not build balanced keyword sets for family {family!r}")


def _sample_split(rng, rule: FamilyRule, num_classes, size, seq_len, keyword_rate):
    V = rule.owner.size
    by_class = [np.flatnonzero(rule.owner == c) for c in range(num_classes)]
    out, seen = [], set()
    while len(out) < size:
        y = int(rng.integers(num_classes))
        from_kw = rng.random(seq_len) < keyword_rate
        ids = np.where(from_kw, rng.choice(by_class[y], size=seq_len), rng.integers(V, size=seq_len))
        mass = rule.keyword_mass(ids)
        winners = np.flatnonzero(mass == mass.max())
        key = ids.tobytes()
        if winners.size != 1 or key in seen:
            continue
        seen.add(key)
        out.append((ids.astype(np.int64), int(winners[0])))
    return tuple(out)


def make_task(model: FrozenToyModel, spec: TaskSpec) -> ToyTask:
    if spec.vocab_size != model.vocab_size or spec.num_classes != model.num_classes:
        raise ConfigError(
            f"task {spec.name!r} expects V={spec.vocab_size}, C={spec.num_classes}; "
            f"model has V={model.vocab_size}, C={model.num_classes}"
        )
    if spec.train_size < 1 or spec.validation_size < 1 or spec.seq_len < 1:
        raise ConfigError(f"task {spec.name!r}: sizes must be positive")
    rule = family_rule(model, spec.family, spec.family_scale)
    rng = np.random.default_rng([spec.rule_seed, zlib.crc32(spec.name.encode("utf-8"))])
    examples = _sample_split(
        rng, rule, model.num_classes, spec.train_size + spec.validation_size, spec.seq_len, spec.keyword_rate
    )
    return ToyTask(
        name=spec.name,
        family=spec.family,
        rule_seed=spec.rule_seed,
        train=examples[: spec.train_size],
        validation=examples[spec.train_size :],
        num_classes=model.num_classes,
    )


def mix_tasks(name: str, train_examples: Sequence, validation_task: ToyTask) -> ToyTask:
    """A task whose training set is a pre-drawn mixture stream."""
    return ToyTask(
        name=name,
        family="mixture",
        rule_seed=validation_task.rule_seed,
        train=tuple(train_examples),
        validation=validation_task.validation,
        num_classes=validation_task.num_classes,
    )


# --- model --------------------------------------------------------------------


def init_prompt_from_vocab(model: FrozenToyModel, L: int, top_n: int, seed: int, task_name: str = "") -> Prompt:
    """Copy ``L`` token rows drawn uniformly from the first ``top_n`` vocabulary entries."""
    if L < 1:
        raise InvalidInputError("prompt length must be >= 1")
    if not 1 <= top_n <= model.vocab_size:
        raise TopNOutOfRangeError(f"top_n={top_n} outside [1, {model.vocab_size}]")
    rng = np.random.default_rng([seed, 0])
    idx = rng.integers(top_n, size=L)
    return Prompt(model.token_table[idx], task_name=task_name, run_seed=seed, step=0)


def _check_ids(model, ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidInputError("input must be a nonempty sequence of token ids")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InvalidInputError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= model.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= model.vocab_size)][0])
        raise TokenIdOutOfRange(f"token id {bad} outside [0, {model.vocab_size})")
    return ids


class _Batch:
    """Token-row sums and lengths for a list of examples."""

    def __init__(self, model, examples):
        if len(examples) == 0:
            raise EmptyBatchError("batch is empty")
        sums = np.empty((len(examples), model.embed_dim))
        lengths = np.empty(len(examples))
        labels = np.empty(len(examples), dtype=np.int64)
        for i, (ids, label) in enumerate(examples):
            ids = _check_ids(model, ids)
            if not 0 <= label < model.num_classes:
                raise InvalidInputError(f"label {label} outside [0, {model.num_classes})")
            sums[i] = model.token_table[ids].sum(axis=0)
            lengths[i] = ids.size
            labels[i] = label
        self.sums, self.lengths, self.labels = sums, lengths, labels

    def take(self, idx) -> "_Batch":
        b = object.__new__(_Batch)
        b.sums, b.lengths, b.labels = self.sums[idx], self.lengths[idx], self.labels[idx]
        return b

    def __len__(self):
        return self.labels.size


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _probs(model, prompt_tokens: np.ndarray, batch: _Batch):
    L = prompt_tokens.shape[0]
    denom = L + batch.lengths
    h = (prompt_tokens.sum(axis=0)[None, :] + batch.sums) / denom[:, None]
    logits = h @ model.head_weights.T + model.head_bias
    return _softmax(logits), denom


def _prompt_tokens(model, prompt) -> np.ndarray:
    tokens = prompt.tokens if isinstance(prompt, Prompt) else np.asarray(prompt, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != model.embed_dim:
        raise InvalidInputError(f"prompt width {tokens.shape} does not match model embed_dim {model.embed_dim}")
    return tokens


def forward(model: FrozenToyModel, prompt, ids) -> np.ndarray:
    """Class probabilities for one input sequence with ``prompt`` prepended."""
    tokens = _prompt_tokens(model, prompt)
    ids = _check_ids(model, ids)
    rows = np.vstack([tokens, model.token_table[ids]])
    h = rows.mean(axis=0)
    return _softmax(model.head_weights @ h + model.head_bias)


def _gradient(model, tokens, batch: _Batch) -> np.ndarray:
    p, denom = _probs(model, tokens, batch)
    p[np.arange(len(batch)), batch.labels] -= 1.0
    # Every prompt row receives the same gradient: mean_b W^T (p - y) / (L + n_b)
    g = ((p / denom[:, None]) @ model.head_weights).mean(axis=0)
    return np.broadcast_to(g, tokens.shape).copy()


def prompt_gradient(model: FrozenToyModel, prompt, batch) -> np.ndarray:
    """Gradient of mean cross-entropy over ``batch`` with respect to the prompt."""
    tokens = _prompt_tokens(model, prompt)
    return _gradient(model, tokens, batch if isinstance(batch, _Batch) else _Batch(model, list(batch)))


def mean_cross_entropy(model: FrozenToyModel, prompt, batch) -> float:
    tokens = _prompt_tokens(model, prompt)
    b = batch if isinstance(batch, _Batch) else _Batch(model, list(batch))
    p, _ = _probs(model, tokens, b)
    return float(-np.log(p[np.arange(len(b)), b.labels]).mean())


def _accuracy(model, tokens, batch: _Batch) -> float:
    p, _ = _probs(model, tokens, batch)
    correct = int((np.argmax(p, axis=1) == batch.labels).sum())
    return 100.0 * correct / len(batch)


def evaluate(model: FrozenToyModel, prompt, split) -> float:
    """Percent accuracy of argmax predictions on ``split``."""
    if len(split) == 0:
        raise EmptySplitError("cannot evaluate on an empty split")
    return _accuracy(model, _prompt_tokens(model, prompt), _Batch(model, list(split)))


# --- tuning -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Checkpoint:
    step: int
    prompt: Prompt
    score: float


@dataclass(frozen=True, eq=False)
class TuningRun:
    """Configuration and (once tuned) checkpoint history of one prompt tuning run.

    ``init`` is either :data:`VOCAB_SAMPLED` or a :class:`Prompt` to transfer
    from. ``initial_score`` is the validation accuracy before the first step.
    """

    task: ToyTask
    init: object = VOCAB_SAMPLED
    steps: int = 2000
    checkpoint_every: int = 50
    learning_rate: float = 0.1
    seed: int = 0
    batch_size: int = 16
    prompt_length: int = 5
    top_n: int | None = None
    checkpoints: tuple = ()
    initial_score: float | None = None

    def __post_init__(self):
        if self.steps < 1 or self.checkpoint_every < 1 or self.batch_size < 1:
            raise InvalidInputError("steps, checkpoint_every and batch_size must be positive")
        if self.learning_rate < 0:
            raise InvalidInputError("learning_rate must be non-negative")
        if not (self.init == VOCAB_SAMPLED or isinstance(self.init, Prompt)):
            raise InvalidInputError("init must be VOCAB_SAMPLED or a Prompt")

    @property
    def checkpoint_steps(self) -> list[int]:
        steps = list(range(self.checkpoint_every, self.steps + 1, self.checkpoint_every))
        if not steps or steps[-1] != self.steps:
            steps.append(self.steps)
        return steps

    @property
    def final(self) -> Checkpoint:
        if not self.checkpoints:
            raise NoCheckpointsError("run has not been tuned")
        return self.checkpoints[-1]

    def checkpoint_at(self, step: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.step == step:
                return c
        raise StepNotCheckpointedError(f"step {step} was not checkpointed (have {[c.step for c in self.checkpoints]})")


def _initial_tokens(model, run: TuningRun) -> np.ndarray:
    if isinstance(run.init, Prompt):
        return _prompt_tokens(model, run.init).copy()
    top_n = run.top_n if run.top_n is not None else model.vocab_size
    return np.array(init_prompt_from_vocab(model, run.prompt_length, top_n, _run_stream(run, 0)).tokens)


def _run_stream(run: TuningRun, purpose: int) -> int:
    # Runs of different tasks with the same seed must not share random streams.
    return zlib.crc32(f"{run.task.name}\0{run.seed}\0{purpose}".encode("utf-8"))


def tune(model: FrozenToyModel, run: TuningRun) -> TuningRun:
    """Run seeded minibatch gradient descent on the prompt only."""
    if run.checkpoints:
        raise InvalidInputError("run already has checkpoints")
    train = _Batch(model, list(run.task.train))
    val = _Batch(model, list(run.task.validation))
    tokens = _initial_tokens(model, run)
    initial = _accuracy(model, tokens, val)
    rng = np.random.default_rng(_run_stream(run, 1))
    wanted = set(run.checkpoint_steps)
    checkpoints = []
    for step in range(1, run.steps + 1):
        idx = rng.integers(len(train), size=run.batch_size)
        tokens -= run.learning_rate * _gradient(model, tokens, train.take(idx))
        if step in wanted:
            prompt = Prompt(tokens, task_name=run.task.name, run_seed=run.seed, step=step)
            checkpoints.append(Checkpoint(step, prompt, _accuracy(model, tokens, val)))
    return replace(run, checkpoints=tuple(checkpoints), initial_score=initial)


def select_best_checkpoint(run: TuningRun, min_step: int = 0) -> Checkpoint:
    """Checkpoint with the highest validation score; earliest step wins ties.

    Checkpoints before ``min_step`` are not considered.
    """
    candidates = [c for c in run.checkpoints if c.step >= min_step]
    if not candidates:
        raise NoCheckpointsError(f"run has no checkpoints at or after step {min_step}")
    best = candidates[0]
    for c in candidates[1:]:
        if c.score > best.score:
            best = c
    return best


def extract_task_embedding(run: TuningRun, embed_step: int) -> TaskEmbedding:
    return run.checkpoint_at(embed_step).prompt.as_embedding(embed_step)
