"""Experiment configuration and the end-to-end transfer pipeline.

Everything here is deterministic given the seeds in the config: source
tuning, library construction, target embeddings, the three transfer methods
and the full source x target sweep.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import BASELINE, TransferTable
from .errors import ConfigError, InvalidInputError
from .library import (
    MANIFEST_NAME,
    LibraryEntry,
    LibraryManifest,
    load_library,
    read_checkpoint,
    save_manifest,
    write_checkpoint,
)
from .prompt import Prompt, SimilarityMetric, TaskEmbedding, cross_run_similarity, similarity
from .retrieval import (
    DEFAULT_MIXTURE_CAP,
    best_of_top_k_plan,
    compose_mixture,
    mixture_rates,
    rank_sources,
    top_k_tasks,
    weighted_average_prompt,
)
from .toy import (
    VOCAB_SAMPLED,
    FrozenToyModel,
    TaskSpec,
    ToyTask,
    TuningRun,
    extract_task_embedding,
    make_task,
    mix_tasks,
    select_best_checkpoint,
    tune,
)

log = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
RUNS_NAME = "runs.json"
METHODS = ("best-of-top-k", "weighted-average", "mixture")


@dataclass
class ExperimentConfig:
    tasks: list[TaskSpec]
    source_tasks: list[str]
    target_tasks: list[str]
    model_seed: int = 0
    vocab_size: int = 200
    embed_dim: int = 16
    num_classes: int = 4
    token_scale: float = 0.5
    head_scale: float = 4.0
    prompt_length: int = 5
    top_n: int = 100
    source_steps: int = 2000
    target_steps: int = 800
    checkpoint_every: int = 50
    embed_step: int = 100
    mixture_steps: int = 2000
    mixture_examples: int = 4096
    mixture_cap: int = DEFAULT_MIXTURE_CAP
    learning_rate: float = 0.1
    batch_size: int = 16
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    metric: str = "avg"
    k_values: list[int] = field(default_factory=lambda: [1, 3])

    def __post_init__(self):
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names in config: {names}")
        for group in ("source_tasks", "target_tasks"):
            for name in getattr(self, group):
                if name not in names:
                    raise ConfigError(f"{group} references undefined task {name!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(s < 0 for s in self.seeds) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct non-negative integers")
        for name in ("source_steps", "target_steps", "checkpoint_every", "mixture_steps", "mixture_examples",
                     "batch_size", "prompt_length", "top_n", "mixture_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.embed_step < 1 or self.embed_step % self.checkpoint_every:
            raise ConfigError("embed_step must be a positive multiple of checkpoint_every")
        if self.embed_step > self.source_steps:
            raise ConfigError("embed_step must not exceed source_steps")
        if self.top_n > self.vocab_size:
            raise ConfigError("top_n must not exceed vocab_size")
        try:
            SimilarityMetric.parse(self.metric)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw_tasks = doc.pop("tasks", None)
        if not isinstance(raw_tasks, list) or not raw_tasks:
            raise ConfigError("config needs a nonempty 'tasks' list")
        V = doc.get("vocab_size", cls.__dataclass_fields__["vocab_size"].default)
        C = doc.get("num_classes", cls.__dataclass_fields__["num_classes"].default)
        tasks = [TaskSpec.from_json(t, vocab_size=V, num_classes=C) for t in raw_tasks]
        try:
            return cls(tasks=tasks, **doc)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["tasks"] = [t.to_json() for t in self.tasks]
        return doc

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **overrides) if overrides else self

    def task_spec(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"task {name!r} is not defined in the config")


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_json(doc)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_json(), indent=2) + "\n", encoding="utf-8")
    return path


def default_config() -> ExperimentConfig:
    """16 source tasks in 4 families, plus one held-out target per family."""
    families = ["entailment", "sentiment", "paraphrase", "qa"]
    V, C = 200, 4
    tasks, sources, targets = [], [], []
    for f_idx, fam in enumerate(families):
        for i in range(4):
            name = f"{fam}-{i}"
            tasks.append(TaskSpec(name, fam, rule_seed=100 * f_idx + i, vocab_size=V, num_classes=C))
            sources.append(name)
        target = f"{fam}-target"
        tasks.append(TaskSpec(target, fam, rule_seed=100 * f_idx + 50, vocab_size=V, num_classes=C, train_size=128))
        targets.append(target)
    return ExperimentConfig(tasks=tasks, source_tasks=sources, target_tasks=targets, vocab_size=V, num_classes=C)


# --- building blocks ----------------------------------------------------------


class Workspace:
    """Model and tasks materialized from a config (cached per task)."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model = FrozenToyModel.seeded(
            cfg.vocab_size, cfg.embed_dim, cfg.num_classes, seed=cfg.model_seed,
            token_scale=cfg.token_scale, head_scale=cfg.head_scale,
        )
        self._tasks: dict[str, ToyTask] = {}

    def task(self, name: str) -> ToyTask:
        if name not in self._tasks:
            self._tasks[name] = make_task(self.model, self.cfg.task_spec(name))
        return self._tasks[name]

    def run(self, task: ToyTask, seed: int, steps: int, init=VOCAB_SAMPLED) -> TuningRun:
        cfg = self.cfg
        return TuningRun(
            task=task,
            init=init,
            steps=steps,
            checkpoint_every=cfg.checkpoint_every,
            learning_rate=cfg.learning_rate,
            seed=seed,
            batch_size=cfg.batch_size,
            prompt_length=cfg.prompt_length,
            top_n=cfg.top_n,
        )

    def tune(self, task: ToyTask, seed: int, steps: int, init=VOCAB_SAMPLED) -> TuningRun:
        return tune(self.model, self.run(task, seed, steps, init))

    def target_embedding(self, target: str, seed: int) -> TaskEmbedding:
        """Embedding of a target task: a short from-scratch run captured at embed_step."""
        run = self.tune(self.task(target), seed, self.cfg.embed_step)
        return extract_task_embedding(run, self.cfg.embed_step)


def _run_dir(task: str, seed: int) -> str:
    return f"runs/{task}/seed{seed}"


def _ckpt_rel(task: str, seed: int, step: int) -> str:
    return f"{_run_dir(task, seed)}/step{step:07d}.ckpt"


# --- library ------------------------------------------------------------------


def train_source(cfg: ExperimentConfig, out_dir) -> LibraryManifest:
    """Tune every source task x seed and write checkpoints, history and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ws = Workspace(cfg)
    history = {"fingerprint": ws.model.fingerprint(), "runs": []}
    for name in cfg.source_tasks:
        task = ws.task(name)
        for seed in cfg.seeds:
            run = ws.tune(task, seed, cfg.source_steps)
            (out / _run_dir(name, seed)).mkdir(parents=True, exist_ok=True)
            for c in run.checkpoints:
                write_checkpoint(c.prompt, out / _ckpt_rel(name, seed, c.step), overwrite=True)
            history["runs"].append({
                "task": name,
                "seed": seed,
                "initial_score": run.initial_score,
                "checkpoints": [[c.step, c.score] for c in run.checkpoints],
            })
            log.info("tuned %s seed %d: best %.2f", name, seed, select_best_checkpoint(run).score)
    save_config(cfg, out / CONFIG_NAME)
    (out / RUNS_NAME).write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    return embed(out)


def embed(library_dir, embed_step: int | None = None) -> LibraryManifest:
    """(Re)build the manifest: embedding keys at ``embed_step``, best prompts as values.

    The best prompt of each run is the highest-validation checkpoint at or
    after the embedding step.
    """
    root = Path(library_dir)
    cfg = load_config(root / CONFIG_NAME)
    if embed_step is not None:
        cfg = cfg.with_overrides(embed_step=embed_step)
        save_config(cfg, root / CONFIG_NAME)
    try:
        history = json.loads((root / RUNS_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{root} has no {RUNS_NAME}; run train-source first") from exc
    entries = []
    for run in history["runs"]:
        steps = [s for s, _ in run["checkpoints"]]
        if cfg.embed_step not in steps:
            raise ConfigError(f"embed_step {cfg.embed_step} was not checkpointed for {run['task']} seed {run['seed']}")
        best_step, best_score = None, None
        for s, score in run["checkpoints"]:
            if s >= cfg.embed_step and (best_score is None or score > best_score):
                best_step, best_score = s, score
        entries.append(LibraryEntry(
            task_name=run["task"],
            run_seed=run["seed"],
            embedding_path=_ckpt_rel(run["task"], run["seed"], cfg.embed_step),
            best_prompt_path=_ckpt_rel(run["task"], run["seed"], best_step),
            best_step=best_step,
            validation_score=best_score,
        ))
    library = LibraryManifest(cfg.embed_step, cfg.prompt_length, cfg.embed_dim, entries, root=root)
    save_manifest(library, root / MANIFEST_NAME)
    return load_library(root / MANIFEST_NAME)


def open_library(library_dir) -> tuple[ExperimentConfig, LibraryManifest]:
    root = Path(library_dir)
    return load_config(root / CONFIG_NAME), load_library(root / MANIFEST_NAME)


# --- transfer -----------------------------------------------------------------


@dataclass
class TransferOutcome:
    method: str
    target: str
    score: float
    prompt: Prompt
    candidates: list = field(default_factory=list)  # (label, score) per target tuning run
    ranked: list = field(default_factory=list)
    target_runs: int = 0


def _score(run: TuningRun) -> float:
    return select_best_checkpoint(run).score


def transfer(
    cfg: ExperimentConfig,
    library: LibraryManifest,
    target: str,
    method: str,
    k: int,
    seed: int | None = None,
    metric=None,
    mixture_checkpoint: str = "final",
) -> TransferOutcome:
    """Retrieve source prompts for ``target`` and run one of the three transfer methods.

    The reported score of a target tuning run is its best validation
    accuracy. ``mixture_checkpoint`` chooses whether mixture tuning hands
    over its final or its best-validation prompt.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}; expected one of {METHODS}")
    if mixture_checkpoint not in ("final", "best"):
        raise InvalidInputError("mixture_checkpoint must be 'final' or 'best'")
    seed = cfg.seeds[0] if seed is None else seed
    metric = SimilarityMetric.parse(metric if metric is not None else cfg.metric)
    ws = Workspace(cfg)
    task = ws.task(target)
    ranked = rank_sources(ws.target_embedding(target, seed), library, metric)

    if method == "best-of-top-k":
        best, candidates = None, []
        for entry in best_of_top_k_plan(ranked, k):
            run = ws.tune(task, seed, cfg.target_steps, init=library.best_prompt(entry))
            ckpt = select_best_checkpoint(run)
            candidates.append((f"{entry.task_name}/{entry.run_seed}", ckpt.score))
            if best is None or ckpt.score > best.score:
                best = ckpt
        return TransferOutcome(method, target, best.score, best.prompt, candidates, ranked, len(candidates))

    if method == "weighted-average":
        plan = best_of_top_k_plan(ranked, k)
        top = [(library.best_prompt(e), r.similarity) for e, r in zip(plan, ranked)]
        init = weighted_average_prompt(top)
        run = ws.tune(task, seed, cfg.target_steps, init=init)
        ckpt = select_best_checkpoint(run)
        return TransferOutcome(method, target, ckpt.score, ckpt.prompt, [("weighted-average", ckpt.score)], ranked, 1)

    names = top_k_tasks(ranked, k)
    datasets = {name: ws.task(name).train for name in names}
    datasets[target] = task.train
    spec = mixture_rates([(name, len(data)) for name, data in datasets.items()], cfg.mixture_cap)
    stream = compose_mixture(spec, datasets, cfg.mixture_examples, seed)
    mixed = mix_tasks(f"mixture:{target}", list(stream), task)
    mix_run = ws.tune(mixed, seed, cfg.mixture_steps)
    handover = mix_run.final if mixture_checkpoint == "final" else select_best_checkpoint(mix_run)
    run = ws.tune(task, seed, cfg.target_steps, init=handover.prompt)
    ckpt = select_best_checkpoint(run)
    return TransferOutcome(method, target, ckpt.score, ckpt.prompt, [("mixture:" + "+".join(names), ckpt.score)], ranked, 1)


# --- sweep --------------------------------------------------------------------


@dataclass
class SweepResult:
    table: TransferTable
    similarity: dict  # target -> source id -> similarity averaged over target runs
    embedding_ids: list
    embedding_similarity: np.ndarray


def source_id(entry: LibraryEntry) -> str:
    return f"{entry.task_name}/{entry.run_seed}"


def sweep(cfg: ExperimentConfig, library: LibraryManifest, targets=None, metric=None) -> SweepResult:
    """Transfer every library prompt to every target, once per seed.

    Also records the target/source embedding similarities (averaged over the
    target's runs) and the pairwise similarity of all library embeddings.
    """
    metric = SimilarityMetric.parse(metric if metric is not None else cfg.metric)
    ws = Workspace(cfg)
    targets = list(targets) if targets else list(cfg.target_tasks)
    runs: dict = {}
    sims: dict = {}
    for target in targets:
        task = ws.task(target)
        t_embs = [ws.target_embedding(target, s) for s in cfg.seeds]
        runs[(BASELINE, target)] = [_score(ws.tune(task, s, cfg.target_steps)) for s in cfg.seeds]
        sims[target] = {}
        for entry in library.entries:
            sid = source_id(entry)
            init = library.best_prompt(entry)
            runs[(sid, target)] = [_score(ws.tune(task, s, cfg.target_steps, init=init)) for s in cfg.seeds]
            sims[target][sid] = cross_run_similarity(t_embs, [library.embedding(entry)], metric)
    ids = [source_id(e) for e in library.entries]
    embs = [library.embedding(e) for e in library.entries]
    n = len(embs)
    mat = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = similarity(embs[i], embs[j], metric)
        if metric is SimilarityMetric.PER_TOKEN:
            mat[i, i] = similarity(embs[i], embs[i], metric)
    return SweepResult(TransferTable.from_runs(runs, len(cfg.seeds)), sims, ids, mat)


def write_similarity(sims: dict, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("target,source,similarity\n")
        for target in sims:
            for source, value in sims[target].items():
                f.write(f"{target},{source},{value!r}\n")
    return path


def read_similarity(path) -> dict:
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"target", "source", "similarity"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected columns target,source,similarity")
        for row in reader:
            out.setdefault(row["target"], {})[row["source"]] = float(row["similarity"])
    return out


def read_embedding(path, embed_step: int) -> TaskEmbedding:
    return read_checkpoint(path).as_embedding(embed_step)
