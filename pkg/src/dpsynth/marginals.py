"""Contingency tables over attribute subsets and the metrics built on them."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DiscreteTable, Schema

MAX_CELLS = 2 ** 22


class MarginalTooLarge(ValueError):
    pass


@dataclass(frozen=True, order=True)
class MarginalQuery:
    attrs: tuple[int, ...]

    def __post_init__(self):
        attrs = tuple(int(a) for a in self.attrs)
        if len(attrs) == 0:
            raise ValueError("a marginal query needs at least one attribute")
        if len(set(attrs)) != len(attrs):
            raise ValueError(f"duplicate attributes in query {attrs}")
        if min(attrs) < 0:
            raise ValueError(f"negative attribute index in {attrs}")
        object.__setattr__(self, "attrs", tuple(sorted(attrs)))

    def __len__(self) -> int:
        return len(self.attrs)

    def __iter__(self):
        return iter(self.attrs)

    def shape(self, domain: Sequence[int]) -> tuple[int, ...]:
        return tuple(domain[a] for a in self.attrs)

    def cells(self, domain: Sequence[int]) -> int:
        return math.prod(self.shape(domain))

    def validate(self, schema: Schema) -> None:
        bad = [a for a in self.attrs if a >= len(schema)]
        if bad:
            raise ValueError(f"attribute indices {bad} out of range for {len(schema)} attributes")
        cells = self.cells(schema.domain)
        if cells > MAX_CELLS:
            raise MarginalTooLarge(f"query {self.attrs} has {cells} cells (limit {MAX_CELLS})")


@dataclass(frozen=True, eq=False)
class MarginalTable:
    query: MarginalQuery
    counts: np.ndarray
    n_total: float
    shape: tuple[int, ...] | None = None

    def array(self) -> np.ndarray:
        """Counts reshaped to one axis per attribute."""
        if self.shape is None:
            raise ValueError("marginal has no shape")
        return np.asarray(self.counts).reshape(self.shape)

    @property
    def frequencies(self) -> np.ndarray:
        if self.n_total <= 0:
            raise ValueError("marginal of an empty table has no frequencies")
        return self.counts / self.n_total


@dataclass(frozen=True)
class Workload:
    queries: tuple[MarginalQuery, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        queries = tuple(q if isinstance(q, MarginalQuery) else MarginalQuery(tuple(q))
                        for q in self.queries)
        if len(set(queries)) != len(queries):
            raise ValueError("workload queries must be distinct")
        object.__setattr__(self, "queries", queries)
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != len(queries) or any(x <= 0 for x in w):
                raise ValueError("weights must be positive, one per query")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.queries)

    def weight_vector(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(self.queries))
        return np.asarray(self.weights)


def cell_index(codes: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Mixed-radix index of each row of ``codes`` (first attribute most significant)."""
    if codes.shape[1] == 0:
        return np.zeros(codes.shape[0], dtype=np.int64)
    return np.ravel_multi_index(tuple(codes.T), tuple(shape))


def compute_marginal(table: DiscreteTable, query: MarginalQuery | Iterable[int]) -> MarginalTable:
    if not isinstance(query, MarginalQuery):
        query = MarginalQuery(tuple(query))
    query.validate(table.schema)
    shape = query.shape(table.domain)
    idx = cell_index(table.rows[:, list(query.attrs)], shape)
    counts = np.bincount(idx, minlength=math.prod(shape)).astype(np.float64)
    return MarginalTable(query, counts, float(table.n), tuple(shape))


def all_kway_workload(schema: Schema, k: int) -> Workload:
    d = len(schema)
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}]")
    return Workload(tuple(MarginalQuery(c) for c in itertools.combinations(range(d), k)))


def load_workload(path: str | Path, schema: Schema) -> Workload:
    """Workload file: JSON list of attribute-name arrays."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list) or not doc:
        raise ValueError("workload file must be a non-empty JSON list")
    return Workload(tuple(MarginalQuery(tuple(schema.index(n) for n in names)) for names in doc))


def workload_to_json(workload: Workload, schema: Schema) -> list[list[str]]:
    return [[schema.names[a] for a in q.attrs] for q in workload.queries]


def _distance(p: np.ndarray, q: np.ndarray, norm: str) -> float:
    diff = p - q
    if norm == "L1":
        return float(np.abs(diff).sum())
    if norm == "L2":
        return float(np.sqrt(np.dot(diff, diff)))
    raise ValueError(f"norm must be 'L1' or 'L2', got {norm!r}")


def workload_errors(real: DiscreteTable, synth: DiscreteTable, workload: Workload,
                    norm: str = "L1") -> np.ndarray:
    """Per-query distance between the two tables' normalised marginals."""
    if real.schema.domain != synth.schema.domain:
        raise ValueError("tables must share a schema")
    if real.n == 0 or synth.n == 0:
        raise ValueError("workload error needs non-empty tables")
    return np.array([
        _distance(compute_marginal(real, q).frequencies,
                  compute_marginal(synth, q).frequencies, norm)
        for q in workload.queries
    ])


def workload_error(real: DiscreteTable, synth: DiscreteTable, workload: Workload,
                   norm: str = "L1") -> float:
    errs = workload_errors(real, synth, workload, norm)
    w = workload.weight_vector()
    return math.fsum(errs * w) / math.fsum(w)


def error_report(real: DiscreteTable, synth: DiscreteTable, workload: Workload,
                 norm: str = "L1") -> dict:
    errs = workload_errors(real, synth, workload, norm)
    w = workload.weight_vector()
    names = real.schema.names
    return {
        "norm": norm,
        "per_query": [{"query": [names[a] for a in q.attrs], "error": float(e)}
                      for q, e in zip(workload.queries, errs)],
        "mean": math.fsum(errs * w) / math.fsum(w),
    }


def mutual_information(joint: MarginalTable) -> float:
    """MI in nats of a two-attribute marginal; empty cells contribute nothing."""
    if len(joint.query) != 2:
        raise ValueError("mutual information needs a 2-way marginal")
    counts = np.asarray(joint.counts, dtype=np.float64)
    if counts.ndim == 1:
        counts = joint.array()
    total = counts.sum()
    if total <= 0:
        raise ValueError("mutual information needs positive mass")
    p = counts / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def kruskal_max(n: int, weighted_edges: Iterable[tuple[float, int, int]]) -> list[tuple[int, int]]:
    """Maximum spanning forest; ties go to the lexicographically smaller edge."""
    order = sorted(weighted_edges, key=lambda e: (-e[0], min(e[1], e[2]), max(e[1], e[2])))
    ds = _DisjointSet(n)
    tree = []
    for _, a, b in order:
        if ds.union(a, b):
            tree.append((min(a, b), max(a, b)))
            if len(tree) == n - 1:
                break
    return tree


def max_spanning_tree(table: DiscreteTable) -> list[tuple[int, int]]:
    """Spanning tree over attributes maximising total pairwise mutual information."""
    d = len(table.schema)
    if d < 2:
        raise ValueError("need at least two attributes")
    edges = []
    for a, b in itertools.combinations(range(d), 2):
        m = compute_marginal(table, (a, b))
        edges.append((mutual_information(m), a, b))
    return kruskal_max(d, edges)
