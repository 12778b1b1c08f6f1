"""Decomposable graphical model over a chordal attribute graph.

The model is stored as calibrated clique marginals (in counts) on a junction
tree, so the joint is prod(clique marginals) / prod(separator marginals).
Noisy measurements are fitted by iterative proportional fitting: each update
rescales the host clique and then pushes the change outward along the tree,
which keeps every clique consistent with the joint.
"""

from __future__ import annotations

import itertools
import math
import string
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import networkx as nx
import numpy as np

from .marginals import MAX_CELLS, MarginalQuery, kruskal_max

IPF_MAX_SWEEPS = 500
IPF_REL_TOL = 1e-6
# sweep-to-sweep change below which inconsistent targets are treated as settled
IPF_STALL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Measurement:
    query: MarginalQuery
    values: np.ndarray
    sigma: float


def attribute_graph(d: int, queries: Sequence[MarginalQuery]) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(range(d))
    for q in queries:
        g.add_edges_from(itertools.combinations(q.attrs, 2))
    return g


def maximal_cliques(g: nx.Graph) -> list[tuple[int, ...]] | None:
    """Sorted maximal cliques of a chordal graph, or None if it is not chordal."""
    if not nx.is_chordal(g):
        return None
    return sorted(tuple(sorted(c)) for c in nx.chordal_graph_cliques(g))


def junction_tree(cliques: Sequence[tuple[int, ...]]) -> list[tuple[int, int]]:
    """Max-weight spanning tree over cliques, weight = separator size.

    For the maximal cliques of a chordal graph this has the running
    intersection property; components are joined by empty separators.
    """
    edges = [(len(set(a) & set(b)), i, j)
             for (i, a), (j, b) in itertools.combinations(enumerate(cliques), 2)]
    return kruskal_max(len(cliques), edges)


def has_running_intersection(cliques: Sequence[tuple[int, ...]],
                             tree: Sequence[tuple[int, int]]) -> bool:
    """Every attribute's cliques form a connected subtree."""
    t = nx.Graph()
    t.add_nodes_from(range(len(cliques)))
    t.add_edges_from(tree)
    if len(cliques) and not nx.is_tree(t):
        return False
    holders = defaultdict(list)
    for i, c in enumerate(cliques):
        for a in c:
            holders[a].append(i)
    return all(nx.is_connected(t.subgraph(nodes)) for nodes in holders.values())


def admissible(d: int, domain: Sequence[int], queries: Sequence[MarginalQuery],
               candidate: MarginalQuery, treewidth_cap: int,
               max_cells: int = MAX_CELLS) -> bool:
    """Whether adding ``candidate`` keeps the graph chordal and within size limits."""
    cliques = maximal_cliques(attribute_graph(d, list(queries) + [candidate]))
    if cliques is None:
        return False
    return all(len(c) <= treewidth_cap + 1 and math.prod(domain[a] for a in c) <= max_cells
               for c in cliques)


def _project(pot: np.ndarray, clique: tuple[int, ...], attrs: Sequence[int],
             keepdims: bool = False) -> np.ndarray:
    keep = set(attrs)
    axes = tuple(i for i, a in enumerate(clique) if a not in keep)
    return pot.sum(axis=axes, keepdims=keepdims) if axes else pot


# potential mass below this is treated as an exact zero; dividing by subnormal
# values would overflow to inf and then turn into NaN
_MASS_FLOOR = 1e-250


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > _MASS_FLOOR)


@dataclass
class ModelState:
    domain: tuple[int, ...]
    measurements: list[Measurement]
    cliques: list[tuple[int, ...]]
    tree: list[tuple[int, int]]
    potentials: list[np.ndarray]
    total_mass: float
    exhausted: bool = False
    ipf_sweeps: int = 0
    _neighbours: dict = field(default=None, repr=False)

    @property
    def queries(self) -> list[MarginalQuery]:
        """Distinct measured queries, in first-measured order."""
        seen = {}
        for m in self.measurements:
            seen.setdefault(m.query, None)
        return list(seen)

    def neighbours(self) -> dict[int, list[int]]:
        if self._neighbours is None:
            nb = defaultdict(list)
            for i, j in self.tree:
                nb[i].append(j)
                nb[j].append(i)
            self._neighbours = {k: sorted(v) for k, v in nb.items()}
        return self._neighbours

    def host(self, attrs: Sequence[int]) -> int | None:
        s = set(attrs)
        for i, c in enumerate(self.cliques):
            if s <= set(c):
                return i
        return None

    def marginal(self, query: MarginalQuery | Sequence[int]) -> np.ndarray:
        """Exact model marginal (counts, flattened in sorted-attribute order)."""
        attrs = query.attrs if isinstance(query, MarginalQuery) else tuple(sorted(query))
        h = self.host(attrs)
        if h is not None:
            return _project(self.potentials[h], self.cliques[h], attrs).ravel()
        return self._eliminate(attrs).ravel()

    def _eliminate(self, attrs: tuple[int, ...]) -> np.ndarray:
        # prune leaves whose query attributes all sit in their separator
        want = set(attrs)
        alive = set(range(len(self.cliques)))
        nb = {k: set(v) for k, v in self.neighbours().items()}
        changed = True
        while changed:
            changed = False
            for i in sorted(alive):
                links = [j for j in nb.get(i, ()) if j in alive]
                if len(alive) > 1 and len(links) == 1:
                    sep = set(self.cliques[i]) & set(self.cliques[links[0]])
                    if (set(self.cliques[i]) & want) <= sep:
                        alive.discard(i)
                        changed = True
        letters = string.ascii_letters
        sub = lambda c: "".join(letters[a] for a in c)
        operands, subs = [], []
        for i in sorted(alive):
            operands.append(self.potentials[i])
            subs.append(sub(self.cliques[i]))
        for i, j in self.tree:
            if i in alive and j in alive:
                sep = tuple(sorted(set(self.cliques[i]) & set(self.cliques[j])))
                mu = _project(self.potentials[i], self.cliques[i], sep)
                operands.append(_ratio(np.ones_like(mu), mu))
                subs.append(sub(sep))
        expr = ",".join(subs) + "->" + sub(attrs)
        return np.einsum(expr, *operands, optimize="greedy")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sampling over the junction tree from clique 0."""
        d = len(self.domain)
        out = np.zeros((n, d), dtype=np.int64)
        done = np.zeros(d, dtype=bool)
        if not self.cliques:
            return out
        nb = self.neighbours()
        order, parent = [0], {0: None}
        for i in order:
            for j in nb.get(i, []):
                if j not in parent:
                    parent[j] = i
                    order.append(j)
        for i in order:
            clique = self.cliques[i]
            sep = [a for a in clique if done[a]]
            rest = [a for a in clique if not done[a]]
            if not rest:
                continue
            pot = self.potentials[i]
            perm = [clique.index(a) for a in sep + rest]
            sep_shape = tuple(self.domain[a] for a in sep)
            rest_shape = tuple(self.domain[a] for a in rest)
            table = np.transpose(pot, perm).reshape(math.prod(sep_shape), math.prod(rest_shape))
            table = np.clip(table, 0.0, None)
            sep_idx = (np.ravel_multi_index(tuple(out[:, sep].T), sep_shape) if sep
                       else np.zeros(n, dtype=np.int64))
            u = rng.random(n)
            flat = np.empty(n, dtype=np.int64)
            for s in np.unique(sep_idx):
                rows = np.flatnonzero(sep_idx == s)
                w = table[s]
                total = w.sum()
                cdf = np.cumsum(w / total) if total > 0 else np.arange(1, w.size + 1) / w.size
                flat[rows] = np.minimum(np.searchsorted(cdf, u[rows], side="right"), w.size - 1)
            out[:, rest] = np.stack(np.unravel_index(flat, rest_shape), axis=1)
            done[rest] = True
        for a in np.flatnonzero(~done):
            out[:, a] = rng.integers(0, self.domain[a], size=n)
        return out


def estimate_total(measurements: Sequence[Measurement], domain: Sequence[int]) -> float:
    """Inverse-variance weighted estimate of the record count from measurement sums."""
    num = den = 0.0
    for m in measurements:
        var = m.query.cells(domain) * m.sigma ** 2
        num += m.values.sum() / var
        den += 1.0 / var
    return max(num / den, 1.0) if den else 1.0


def combined_targets(measurements: Sequence[Measurement], domain: Sequence[int],
                     total: float) -> list[tuple[MarginalQuery, np.ndarray, float]]:
    """Merge repeated measurements of a query, clamp at zero, rescale to ``total``.

    Returned noisiest-first so that the sharpest targets are applied last in a sweep.
    """
    groups: dict[MarginalQuery, list[Measurement]] = {}
    for m in measurements:
        groups.setdefault(m.query, []).append(m)
    out = []
    for q, ms in groups.items():
        w = np.array([1.0 / m.sigma ** 2 for m in ms])
        y = sum(wi * m.values for wi, m in zip(w, ms)) / w.sum()
        y = np.clip(y, 0.0, None)
        s = y.sum()
        y = y * (total / s) if s > 0 else np.full(y.size, total / y.size)
        out.append((q, y.reshape(q.shape(domain)), float(1.0 / math.sqrt(w.sum()))))
    out.sort(key=lambda t: -t[2])
    return out


def build_model(domain: Sequence[int], measurements: Sequence[Measurement],
                warm_start: ModelState | None = None) -> ModelState:
    """Fit a decomposable model to all measurements by IPF.

    Warm-starting from a previous fit is valid because that model factorises
    over any supergraph of its own structure.
    """
    domain = tuple(domain)
    d = len(domain)
    queries = list(dict.fromkeys(m.query for m in measurements))
    cliques = maximal_cliques(attribute_graph(d, queries))
    if cliques is None:
        raise ValueError("measured queries do not form a chordal graph")
    tree = junction_tree(cliques)
    total = estimate_total(measurements, domain)
    state = ModelState(domain, list(measurements), cliques, tree, [], total)
    if warm_start is not None:
        scale = total / warm_start.total_mass
        pots = [warm_start.marginal(c).reshape([domain[a] for a in c]) * scale for c in cliques]
    else:
        pots = [np.full([domain[a] for a in c], total / math.prod(domain[a] for a in c))
                for c in cliques]
    state.potentials = pots
    state.ipf_sweeps = fit_ipf(state, combined_targets(measurements, domain, total))
    return state


def _propagate(state: ModelState, root: int) -> None:
    nb = state.neighbours()
    pots, cliques = state.potentials, state.cliques
    stack, seen = [root], {root}
    while stack:
        i = stack.pop()
        for j in nb.get(i, []):
            if j in seen:
                continue
            seen.add(j)
            sep = tuple(a for a in cliques[j] if a in cliques[i])
            src = _project(pots[i], cliques[i], sep)
            dst = _project(pots[j], cliques[j], sep, keepdims=True)
            pots[j] = pots[j] * _ratio(src.reshape(dst.shape), dst)
            stack.append(j)


def fit_ipf(state: ModelState, targets, max_sweeps: int = IPF_MAX_SWEEPS,
            rel_tol: float = IPF_REL_TOL) -> int:
    """Run IPF sweeps in place; returns the number of sweeps performed."""
    hosts = [state.host(q.attrs) for q, _, _ in targets]
    tol = rel_tol * state.total_mass
    for sweep in range(1, max_sweeps + 1):
        before = [p.copy() for p in state.potentials]
        for (q, y, _), h in zip(targets, hosts):
            clique = state.cliques[h]
            cur = _project(state.potentials[h], clique, q.attrs, keepdims=True)
            state.potentials[h] = state.potentials[h] * _ratio(y.reshape(cur.shape), cur)
            _propagate(state, h)
        gap = max((np.abs(_project(state.potentials[h], state.cliques[h], q.attrs) - y).sum()
                   for (q, y, _), h in zip(targets, hosts)), default=0.0)
        if gap < tol:
            return sweep
        # noisy targets are usually mutually inconsistent, so the gap can stay
        # above tol forever; stop once a sweep no longer moves the fit
        moved = max(np.abs(p - b).max() for p, b in zip(state.potentials, before))
        if moved < IPF_STALL_TOL * state.total_mass:
            return sweep
    return max_sweeps
