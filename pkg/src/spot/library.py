"""On-disk prompt library: binary checkpoints plus a JSON manifest.

Checkpoint layout (little-endian throughout)::

    magic      4 bytes   b"SPOT"
    version    u32       1
    name_len   u32       length of task_name in bytes
    task_name  name_len  UTF-8
    run_seed   u32
    step       u64
    L          u32
    E          u32
    dtype      u8        0 = float32
    payload    L*E*4     row-major float32

The manifest maps each (task, seed) pair to a task-embedding checkpoint (the
key used for retrieval) and a best-validation prompt checkpoint (the value
used for transfer). Paths in the manifest are relative to its directory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DuplicateEntryError,
    InvalidInputError,
    MissingFileError,
    PathExistsError,
    SchemaError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .prompt import Prompt, TaskEmbedding

__all__ = [
    "MAGIC",
    "VERSION",
    "write_checkpoint",
    "read_checkpoint",
    "LibraryEntry",
    "LibraryManifest",
    "load_library",
    "save_manifest",
]

MAGIC = b"SPOT"
VERSION = 1
DTYPE_FLOAT32 = 0
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4")}

MANIFEST_NAME = "manifest.json"


def _encode(p: Prompt, dtype: int = DTYPE_FLOAT32) -> bytes:
    name = p.task_name.encode("utf-8")
    L, E = p.shape
    for label, value, bits in (("run_seed", p.run_seed, 32), ("L", L, 32), ("E", E, 32), ("step", p.step, 64)):
        if not 0 <= value < 2**bits:
            raise InvalidInputError(f"{label}={value} does not fit in an unsigned {bits}-bit field")
    header = (
        MAGIC
        + struct.pack("<II", VERSION, len(name))
        + name
        + struct.pack("<IQIIB", p.run_seed, p.step, L, E, dtype)
    )
    payload = np.ascontiguousarray(p.tokens, dtype=_DTYPES[dtype]).tobytes()
    return header + payload


def write_checkpoint(p: Prompt, path, overwrite: bool = False) -> None:
    """Serialize ``p`` to ``path``.

    Values are narrowed to float32 on disk. The file is written to a
    temporary sibling and renamed into place, so a failed write never leaves
    a partial checkpoint behind.
    """
    if not isinstance(p, Prompt):
        # Route raw matrices through Prompt validation (rejects L=0 etc.).
        p = Prompt(p)
    path = Path(path)
    if path.exists() and not overwrite:
        raise PathExistsError(f"{path} already exists (pass overwrite=True to replace it)")
    data = _encode(p)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedPayloadError(
                f"file ends while reading {what}: need {n} bytes, {len(self.data) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Prompt:
    """Parse a checkpoint file into a float64 :class:`Prompt`."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"checkpoint {path} does not exist") from exc
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}", offset=4)
    (name_len,) = r.unpack("<I", "task name length")
    name_offset = r.offset
    try:
        task_name = r.take(name_len, "task name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: task name at byte offset {name_offset} is not valid UTF-8") from exc
    run_seed, step, L, E = r.unpack("<IQII", "header fields")
    dtype_offset = r.offset
    (dtype,) = r.unpack("<B", "dtype")
    if dtype not in _DTYPES:
        raise UnsupportedVersionError(f"{path}: unsupported dtype code {dtype}", offset=dtype_offset)
    if L < 1 or E < 1:
        raise SchemaError(f"{path}: invalid prompt shape {L}x{E}")
    expected = L * E * _DTYPES[dtype].itemsize
    payload_offset = r.offset
    available = len(data) - payload_offset
    if available < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {available} bytes, expected {expected} for a {L}x{E} prompt",
            offset=payload_offset,
        )
    if available > expected:
        raise SchemaError(f"{path}: {available - expected} trailing bytes after payload")
    tokens = np.frombuffer(data, dtype=_DTYPES[dtype], count=L * E, offset=payload_offset)
    return Prompt(tokens.reshape(L, E).astype(np.float64), task_name=task_name, run_seed=run_seed, step=step)


@dataclass(frozen=True)
class LibraryEntry:
    task_name: str
    run_seed: int
    embedding_path: str
    best_prompt_path: str
    best_step: int
    validation_score: float

    @property
    def key(self) -> tuple[str, int]:
        return (self.task_name, self.run_seed)

    def to_json(self) -> dict:
        return {
            "task": self.task_name,
            "seed": self.run_seed,
            "embedding": self.embedding_path,
            "best_prompt": self.best_prompt_path,
            "best_step": self.best_step,
            "val_score": self.validation_score,
        }


@dataclass
class LibraryManifest:
    """A validated prompt library.

    Checkpoints are read lazily through :meth:`embedding` and
    :meth:`best_prompt` and cached afterwards. Entries are kept sorted by
    ``(task_name, run_seed)``.
    """

    embed_step: int
    L: int
    E: int
    entries: list[LibraryEntry]
    root: Path = field(default_factory=Path)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.entries = sorted(self.entries, key=lambda e: e.key)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def find(self, task_name: str, run_seed: int) -> LibraryEntry:
        for e in self.entries:
            if e.key == (task_name, run_seed):
                return e
        raise KeyError(f"no library entry for task {task_name!r} seed {run_seed}")

    def embedding(self, entry: LibraryEntry) -> TaskEmbedding:
        key = ("embedding", entry.key)
        if key not in self._cache:
            p = read_checkpoint(self.resolve(entry.embedding_path))
            self._cache[key] = p.as_embedding(self.embed_step)
        return self._cache[key]

    def best_prompt(self, entry: LibraryEntry) -> Prompt:
        key = ("best_prompt", entry.key)
        if key not in self._cache:
            self._cache[key] = read_checkpoint(self.resolve(entry.best_prompt_path))
        return self._cache[key]

    def to_json(self) -> dict:
        return {
            "embed_step": self.embed_step,
            "L": self.L,
            "E": self.E,
            "entries": [e.to_json() for e in self.entries],
        }


_ENTRY_FIELDS = {
    "task": str,
    "seed": int,
    "embedding": str,
    "best_prompt": str,
    "best_step": int,
    "val_score": (int, float),
}


def _nonneg_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise SchemaError(f"{where} must be a non-negative integer, got {value!r}")
    return value


def _parse_entry(raw, index: int) -> LibraryEntry:
    where = f"entries[{index}]"
    if not isinstance(raw, dict):
        raise SchemaError(f"{where} must be an object")
    for name, kind in _ENTRY_FIELDS.items():
        if name not in raw:
            raise SchemaError(f"{where} is missing field {name!r}")
        value = raw[name]
        if isinstance(value, bool) or not isinstance(value, kind):
            raise SchemaError(f"{where}.{name} has wrong type {type(value).__name__}")
    _nonneg_int(raw["seed"], f"{where}.seed")
    _nonneg_int(raw["best_step"], f"{where}.best_step")
    score = float(raw["val_score"])
    if not 0.0 <= score <= 100.0:
        raise SchemaError(f"{where}.val_score must lie in [0, 100], got {score}")
    return LibraryEntry(
        task_name=raw["task"],
        run_seed=raw["seed"],
        embedding_path=raw["embedding"],
        best_prompt_path=raw["best_prompt"],
        best_step=raw["best_step"],
        validation_score=score,
    )


def parse_manifest(doc, root=".", check_files: bool = True) -> LibraryManifest:
    """Validate a manifest document; every violation names its entry index."""
    if not isinstance(doc, dict):
        raise SchemaError("manifest must be a JSON object")
    for name in ("embed_step", "L", "E", "entries"):
        if name not in doc:
            raise SchemaError(f"manifest is missing field {name!r}")
    embed_step = _nonneg_int(doc["embed_step"], "embed_step")
    L = _nonneg_int(doc["L"], "L")
    E = _nonneg_int(doc["E"], "E")
    if L < 1 or E < 1:
        raise SchemaError(f"manifest shape must be at least 1x1, got {L}x{E}")
    if not isinstance(doc["entries"], list):
        raise SchemaError("entries must be a list")

    root = Path(root)
    entries = []
    seen = {}
    for i, raw in enumerate(doc["entries"]):
        entry = _parse_entry(raw, i)
        if entry.key in seen:
            raise DuplicateEntryError(
                f"entries[{i}] duplicates entries[{seen[entry.key]}] for task {entry.task_name!r} seed {entry.run_seed}"
            )
        seen[entry.key] = i
        if entry.best_step < embed_step:
            raise SchemaError(f"entries[{i}].best_step {entry.best_step} is before embed_step {embed_step}")
        if check_files:
            for label, rel in (("embedding", entry.embedding_path), ("best_prompt", entry.best_prompt_path)):
                path = root / rel
                if not path.is_file():
                    raise MissingFileError(f"entries[{i}].{label}: {path} does not exist")
                p = read_checkpoint(path)
                if p.shape != (L, E):
                    raise ShapeMismatchError(f"entries[{i}].{label}: checkpoint shape {p.shape} != library shape {(L, E)}")
                if (p.task_name, p.run_seed) != entry.key:
                    raise SchemaError(
                        f"entries[{i}].{label}: checkpoint is for ({p.task_name!r}, {p.run_seed}), expected {entry.key}"
                    )
                if label == "embedding" and p.step != embed_step:
                    raise SchemaError(f"entries[{i}].embedding: checkpoint step {p.step} != embed_step {embed_step}")
        entries.append(entry)
    return LibraryManifest(embed_step=embed_step, L=L, E=E, entries=entries, root=root)


def load_library(manifest_path) -> LibraryManifest:
    """Load and validate a manifest; ``manifest_path`` may be the file or its directory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingFileError(f"manifest {manifest_path} does not exist") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{manifest_path}: not valid JSON ({exc})") from exc
    return parse_manifest(doc, root=manifest_path.parent)


def save_manifest(library: LibraryManifest, path=None) -> Path:
    path = Path(path) if path is not None else library.root / MANIFEST_NAME
    text = json.dumps(library.to_json(), indent=2, sort_keys=False) + "\n"
    path.write_text(text, encoding="utf-8")
    return path
