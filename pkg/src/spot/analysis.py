"""Transfer statistics: relative error reduction, oracle search, correlation
and hierarchical clustering of task similarities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .errors import (
    AsymmetricInputError,
    BaselinePerfectError,
    DegenerateVarianceError,
    EmptyListError,
    InvalidInputError,
    LengthMismatchError,
    SchemaError,
)

__all__ = [
    "BASELINE",
    "TransferTable",
    "OracleResult",
    "CorrelationReport",
    "Merge",
    "ClusterTree",
    "relative_error_reduction",
    "aggregate_runs",
    "oracle_search",
    "pearson",
    "correlation_reports",
    "cluster_order",
    "export_heatmap",
    "read_heatmap",
    "load_published_fixture",
]

BASELINE = "BASELINE"


def relative_error_reduction(baseline: float, transferred: float) -> float:
    """Percent of the baseline's remaining error removed by transfer.

    Negative values mean the transfer hurt.
    """
    for name, v in (("baseline", baseline), ("transferred", transferred)):
        if not 0.0 <= v <= 100.0:
            raise InvalidInputError(f"{name} score {v} outside [0, 100]")
    if baseline == 100.0:
        raise BaselinePerfectError("relative error reduction is undefined for a perfect baseline")
    return 100.0 * (transferred - baseline) / (100.0 - baseline)


def aggregate_runs(scores: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (divides by n)."""
    xs = np.asarray(list(scores), dtype=np.float64)
    if xs.size == 0:
        raise EmptyListError("no scores to aggregate")
    mean = float(xs.mean())
    return mean, float(np.sqrt(np.mean((xs - mean) ** 2)))


@dataclass
class TransferTable:
    """Mean/std scores for every (source, target) cell plus a baseline row.

    ``scores[i, j]`` is the score of source ``sources[i]`` on target
    ``targets[j]``. The row named :data:`BASELINE` holds from-scratch scores.
    """

    targets: list[str]
    sources: list[str]
    scores: np.ndarray
    stds: np.ndarray
    runs_per_cell: int = 3

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        shape = (len(self.sources), len(self.targets))
        if self.scores.shape != shape or self.stds.shape != shape:
            raise SchemaError(f"score matrices must be {shape}")
        if BASELINE not in self.sources:
            raise SchemaError("transfer table has no BASELINE row")
        if len(set(self.sources)) != len(self.sources) or len(set(self.targets)) != len(self.targets):
            raise SchemaError("duplicate source or target ids")
        if not np.all(np.isfinite(self.scores)):
            raise SchemaError("scores must be finite")
        if np.any(self.stds < 0):
            raise SchemaError("standard deviations must be non-negative")
        if self.runs_per_cell < 1:
            raise SchemaError("runs_per_cell must be positive")

    @property
    def transfer_sources(self) -> list[str]:
        return [s for s in self.sources if s != BASELINE]

    def score(self, source: str, target: str) -> float:
        return float(self.scores[self.sources.index(source), self.targets.index(target)])

    def baseline(self) -> np.ndarray:
        return self.scores[self.sources.index(BASELINE)]

    def rer_matrix(self) -> tuple[list[str], list[str], np.ndarray]:
        """Relative error reduction of every non-baseline source on every target.

        Cells whose baseline is perfect (100) are NaN.
        """
        base = self.baseline()
        srcs = self.transfer_sources
        out = np.empty((len(srcs), len(self.targets)))
        for i, s in enumerate(srcs):
            row = self.scores[self.sources.index(s)]
            for j in range(len(self.targets)):
                out[i, j] = np.nan if base[j] == 100.0 else relative_error_reduction(base[j], row[j])
        return srcs, list(self.targets), out

    @classmethod
    def from_runs(cls, runs: dict, runs_per_cell: int | None = None) -> "TransferTable":
        """Build from ``{(source, target): [score per seed]}``."""
        sources, targets = [], []
        for s, t in runs:
            if s not in sources:
                sources.append(s)
            if t not in targets:
                targets.append(t)
        scores = np.full((len(sources), len(targets)), np.nan)
        stds = np.full_like(scores, np.nan)
        counts = set()
        for (s, t), vals in runs.items():
            m, sd = aggregate_runs(vals)
            scores[sources.index(s), targets.index(t)] = m
            stds[sources.index(s), targets.index(t)] = sd
            counts.add(len(vals))
        if np.isnan(scores).any():
            raise SchemaError("transfer runs do not cover every (source, target) cell")
        n = runs_per_cell if runs_per_cell is not None else min(counts)
        return cls(targets, sources, scores, stds, n)

    @classmethod
    def from_csv(cls, path) -> "TransferTable":
        with open(path, newline="", encoding="utf-8") as f:
            return cls._from_rows(csv.DictReader(f), str(path))

    @classmethod
    def _from_rows(cls, reader, where: str) -> "TransferTable":
        need = {"source", "target", "mean", "std"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{where}: expected columns {sorted(need)} (plus optional 'runs')")
        cells, sources, targets, runs = {}, [], [], set()
        for lineno, row in enumerate(reader, start=2):
            try:
                s, t = row["source"], row["target"]
                mean, std = float(row["mean"]), float(row["std"])
                if row.get("runs"):
                    runs.add(int(row["runs"]))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{where}:{lineno}: {exc}") from exc
            if (s, t) in cells:
                raise SchemaError(f"{where}:{lineno}: duplicate cell ({s}, {t})")
            cells[(s, t)] = (mean, std)
            if s not in sources:
                sources.append(s)
            if t not in targets:
                targets.append(t)
        scores = np.full((len(sources), len(targets)), np.nan)
        stds = np.full_like(scores, np.nan)
        for (s, t), (m, sd) in cells.items():
            scores[sources.index(s), targets.index(t)] = m
            stds[sources.index(s), targets.index(t)] = sd
        if np.isnan(scores).any():
            raise SchemaError(f"{where}: table is missing cells")
        return cls(targets, sources, scores, stds, min(runs) if runs else 3)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["source", "target", "mean", "std", "runs"])
            for i, s in enumerate(self.sources):
                for j, t in enumerate(self.targets):
                    w.writerow([s, t, repr(float(self.scores[i, j])), repr(float(self.stds[i, j])), self.runs_per_cell])
        return path


def load_published_fixture() -> TransferTable:
    """The published source x target transfer table (means and stds over 3 seeds)."""
    ref = resources.files("spot") / "data" / "published_transfer.csv"
    with ref.open("r", encoding="utf-8", newline="") as f:
        return TransferTable._from_rows(csv.DictReader(f), "published_transfer.csv")


@dataclass(frozen=True)
class OracleResult:
    best_source: dict[str, str]
    best_score: dict[str, float]
    average: float
    baseline_average: float

    @property
    def average_gain(self) -> float:
        return self.average - self.baseline_average


def oracle_search(table: TransferTable) -> OracleResult:
    """Best source per target by brute force; ties go to the lexicographically
    smallest source id."""
    srcs = sorted(table.transfer_sources)
    if not srcs:
        raise SchemaError("transfer table has no sources besides BASELINE")
    best_source, best_score = {}, {}
    for t in table.targets:
        top = None
        for s in srcs:
            v = table.score(s, t)
            if top is None or v > top[1]:
                top = (s, v)
        best_source[t], best_score[t] = top
    avg = sum(best_score[t] for t in table.targets) / len(table.targets)
    return OracleResult(best_source, best_score, avg, float(table.baseline().mean()))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson r with a two-sided p-value from Student's t (n - 2 dof).

    The p-value is the regularized incomplete beta
    ``I_{df/(df+t^2)}(df/2, 1/2)``.
    """
    x = np.asarray(list(xs), dtype=np.float64)
    y = np.asarray(list(ys), dtype=np.float64)
    if x.size != y.size:
        raise LengthMismatchError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 3:
        raise InvalidInputError(f"need at least 3 points for a p-value, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVarianceError("pearson correlation needs nonzero variance in both variables")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    p = float(special.betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, min(1.0, max(0.0, p))


@dataclass(frozen=True)
class CorrelationReport:
    target: str
    points: tuple
    r: float
    p_value: float


def correlation_reports(similarity: dict, rer: dict) -> list[CorrelationReport]:
    """Per-target Pearson reports.

    ``similarity[target][source]`` and ``rer[target][source]``; each source
    present in both contributes one point. Targets with fewer than 3 points
    or degenerate variance are skipped.
    """
    reports = []
    for target in sorted(similarity):
        if target not in rer:
            continue
        common = [s for s in similarity[target] if s in rer[target]]
        points = tuple((float(similarity[target][s]), float(rer[target][s])) for s in common)
        if len(points) < 3:
            continue
        try:
            r, p = pearson([a for a, _ in points], [b for _, b in points])
        except DegenerateVarianceError:
            continue
        reports.append(CorrelationReport(target, points, r, p))
    return reports


# --- clustering ---------------------------------------------------------------


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class ClusterTree:
    """Merge history in the usual linkage convention.

    Leaves are ``0..n-1``; the cluster created by ``merges[i]`` has id
    ``n + i``.
    """

    n: int
    merges: tuple[Merge, ...]
    order: tuple[int, ...]

    @property
    def heights(self) -> list[float]:
        return [m.height for m in self.merges]

    def as_linkage(self) -> np.ndarray:
        return np.array([[m.left, m.right, m.height, m.size] for m in self.merges], dtype=np.float64).reshape(-1, 4)


def cluster_order(sim, tol: float = 1e-9) -> ClusterTree:
    """Average-linkage agglomerative clustering on ``1 - sim``.

    At each step the closest pair of clusters merges; equal distances go to
    the pair whose smallest original indices are lowest. Within a merge the
    child holding the lower original index is placed on the left, which
    fixes the leaf order.
    """
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise InvalidInputError(f"similarity matrix must be square, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("similarity matrix must be finite")
    if s.size and np.max(np.abs(s - s.T)) > tol:
        raise AsymmetricInputError(f"similarity matrix is not symmetric within {tol}")
    n = s.shape[0]
    if n == 0:
        raise InvalidInputError("empty similarity matrix")
    d = 1.0 - 0.5 * (s + s.T)

    # cluster id -> (size, lowest original index, leaf order)
    info = {i: (1, i, (i,)) for i in range(n)}
    dist = {(i, j): float(d[i, j]) for i in range(n) for j in range(i + 1, n)}
    merges = []
    next_id = n
    while len(info) > 1:
        a, b = min(dist, key=lambda ab: (dist[ab], min(info[ab[0]][1], info[ab[1]][1]), max(info[ab[0]][1], info[ab[1]][1])))
        height = dist[(a, b)]
        if info[a][1] > info[b][1]:
            a, b = b, a
        size_a, size_b = info[a][0], info[b][0]
        new = next_id
        next_id += 1
        for k in list(info):
            if k in (a, b):
                continue
            dak = dist.pop((min(a, k), max(a, k)))
            dbk = dist.pop((min(b, k), max(b, k)))
            # Lance-Williams update for average linkage
            dist[(k, new)] = (size_a * dak + size_b * dbk) / (size_a + size_b)
        del dist[(min(a, b), max(a, b))]
        info[new] = (size_a + size_b, info[a][1], info[a][2] + info[b][2])
        del info[a], info[b]
        merges.append(Merge(a, b, height, size_a + size_b))
    (root,) = info.values()
    return ClusterTree(n=n, merges=tuple(merges), order=root[2])


# --- export -------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def export_heatmap(matrix, path, row_ids=None, col_ids=None, clustered: bool = False) -> Path:
    """Write a labelled matrix as CSV with 6 significant digits.

    ``matrix`` may also be a :class:`TransferTable`, in which case its
    relative error reduction matrix is written. With ``clustered=True`` the
    (square, symmetric) matrix is permuted by :func:`cluster_order`.
    """
    if isinstance(matrix, TransferTable):
        row_ids, col_ids, values = matrix.rer_matrix()
    else:
        values = np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidInputError("heatmap values must be a matrix")
    rows = list(row_ids) if row_ids is not None else [str(i) for i in range(values.shape[0])]
    cols = list(col_ids) if col_ids is not None else list(rows if values.shape[0] == values.shape[1] else range(values.shape[1]))
    cols = [str(c) for c in cols]
    if len(rows) != values.shape[0] or len(cols) != values.shape[1]:
        raise InvalidInputError("row/column id counts do not match the matrix shape")
    if clustered:
        order = list(cluster_order(values).order)
        values = values[np.ix_(order, order)]
        rows = [rows[i] for i in order]
        cols = [cols[i] for i in order]
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id"] + cols)
        for rid, row in zip(rows, values):
            w.writerow([rid] + [_fmt(v) for v in row])
    return path


def read_heatmap(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise SchemaError(f"{path}: empty heatmap file") from exc
        cols = header[1:]
        rows, values = [], []
        for lineno, line in enumerate(reader, start=2):
            if len(line) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(line)}")
            rows.append(line[0])
            try:
                values.append([float(v) for v in line[1:]])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return rows, cols, np.array(values, dtype=np.float64).reshape(len(rows), len(cols))
