"""Score-based structure learning: decomposable AIC/BIC and tabu search over single-arc moves."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bn import Dag, as_table, family_counts, topological_order
from .errors import ArityMismatch, CyclicGraph

SCORES = ("aic", "bic")


def _check_kind(kind: str) -> str:
    k = kind.lower()
    if k not in SCORES:
        raise ValueError(f"unknown score {kind!r}; expected one of {SCORES}")
    return k


class ScoreCache:
    """Local score terms keyed by ``(node, parent set)`` for one data table.

    A local term is ``sum n(x, pa) log(n(x, pa) / n(pa)) - penalty``; parent
    configurations that never occur contribute nothing to the likelihood part but
    still count toward the free-parameter penalty.
    """

    def __init__(self, data, kind: str = "bic"):
        self.table = as_table(data)
        self.kind = _check_kind(kind)
        self.codes = self.table.codes
        self.arities = tuple(int(a) for a in self.table.arities)
        self.n = self.table.n
        self._cache: dict[tuple[int, tuple[int, ...]], float] = {}
        self._penalty_unit = 1.0 if self.kind == "aic" else 0.5 * math.log(max(self.n, 1))

    def local(self, node: int, parents: Iterable[int]) -> float:
        key = (node, tuple(sorted(parents)))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        counts = family_counts(self.codes, node, key[1], self.arities)
        nz = counts[counts > 0].astype(float)
        tot = counts.sum(axis=1)
        tot = tot[tot > 0].astype(float)
        ll = float((nz * np.log(nz)).sum() - (tot * np.log(tot)).sum())
        k = (self.arities[node] - 1) * counts.shape[0]
        value = ll - self._penalty_unit * k
        self._cache[key] = value
        return value

    def total(self, parents: Sequence[Iterable[int]]) -> float:
        return sum(self.local(i, ps) for i, ps in enumerate(parents))

    def __len__(self) -> int:
        return len(self._cache)


def free_parameters(dag: Dag) -> int:
    ar = dag.arities
    return sum((ar[l] - 1) * int(np.prod([ar[p] for p in dag.parents[l]], dtype=np.int64)) for l in range(dag.n_nodes))


def score(dag: Dag, data, kind: str = "bic") -> float:
    """Penalised log-likelihood of the MLE on ``dag``; higher is better.

    AIC = logL - K and BIC = logL - (K/2) log n, with K the free-parameter count.
    """
    table = as_table(data)
    if tuple(int(a) for a in table.arities) != dag.arities:
        raise ArityMismatch(f"data arities {tuple(table.arities)} do not match DAG arities {dag.arities}")
    return ScoreCache(table, kind).total(dag.parents)


def is_acyclic(dag) -> bool:
    """True iff a topological order exists. Accepts a :class:`Dag` or raw parent lists/mapping."""
    if isinstance(dag, Dag):
        return True  # construction already rejects cycles
    if isinstance(dag, Mapping):
        m = 1 + max([k for k in dag] + [p for ps in dag.values() for p in ps], default=-1)
        parents = [tuple(dag.get(i, ())) for i in range(m)]
    else:
        parents = [tuple(ps) for ps in dag]
    return topological_order(parents) is not None


@dataclass(frozen=True)
class TabuConfig:
    tabu_len: int = 10
    max_iter: int | None = None  # None -> 100 * number of nodes
    seed: int = 0
    forbidden: frozenset = field(default_factory=frozenset)
    required: frozenset = field(default_factory=frozenset)
    max_parents: int | None = None

    def __post_init__(self):
        if self.tabu_len < 1:
            raise ValueError("tabu_len must be >= 1")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        object.__setattr__(self, "forbidden", frozenset(tuple(a) for a in self.forbidden))
        object.__setattr__(self, "required", frozenset(tuple(a) for a in self.required))
        clash = self.forbidden & self.required
        if clash:
            raise ValueError(f"arcs both required and forbidden: {sorted(clash)}")


def _reaches(children: list[set[int]], src: int, dst: int) -> bool:
    stack = [src]
    seen = {src}
    while stack:
        v = stack.pop()
        if v == dst:
            return True
        for c in children[v]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return False


def _arc_key(parents: Sequence[set[int]]) -> tuple[tuple[int, int], ...]:
    return tuple(sorted((p, c) for c, ps in enumerate(parents) for p in ps))


@dataclass
class SearchTrace:
    """Per-iteration record of a tabu run (current and best-so-far scores)."""

    current: list[float] = field(default_factory=list)
    best: list[float] = field(default_factory=list)
    moves: list[tuple[str, int, int]] = field(default_factory=list)


def tabu_search(
    data,
    kind: str = "bic",
    cfg: TabuConfig | None = None,
    trace: SearchTrace | None = None,
    cache: ScoreCache | None = None,
) -> Dag:
    """Greedy ascent over add/delete/reverse moves with a tabu list of visited structures.

    At each step the best non-tabu move is taken even when it lowers the score.
    Candidates are enumerated over ordered node pairs in lexicographic order and
    ties (within floating tolerance) go to the structure with fewer arcs, then the
    lexicographically smallest arc list. The search stops after ``max_iter`` moves
    or ``tabu_len`` consecutive moves without improving the best score, and
    returns the best structure seen.
    """
    cfg = cfg or TabuConfig()
    table = as_table(data)
    cache = cache or ScoreCache(table, kind)
    m = len(table.nodes)
    if m < 2:
        raise ValueError("structure search needs at least two nodes")
    max_iter = cfg.max_iter if cfg.max_iter is not None else 100 * m

    parents: list[set[int]] = [set() for _ in range(m)]
    for a, b in sorted(cfg.required):
        parents[b].add(a)
    if topological_order(parents) is None:
        raise CyclicGraph("required arcs contain a cycle")
    children: list[set[int]] = [set() for _ in range(m)]
    for c, ps in enumerate(parents):
        for p in ps:
            children[p].add(c)

    local = [cache.local(i, parents[i]) for i in range(m)]
    current = sum(local)
    best_score = current
    best_parents = [set(p) for p in parents]
    key = _arc_key(parents)
    tabu = deque([key], maxlen=cfg.tabu_len)
    stale = 0

    for _ in range(max_iter):
        cands = []  # (score, n_arcs, arcs, op, i, j, new local terms)
        n_arcs = len(key)
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                if i in parents[j]:
                    if (i, j) in cfg.required:
                        continue
                    # delete i -> j
                    new_j = parents[j] - {i}
                    lj = cache.local(j, new_j)
                    cands.append((current - local[j] + lj, n_arcs - 1, "del", i, j, ((j, lj),)))
                    # reverse i -> j into j -> i
                    if (j, i) in cfg.forbidden:
                        continue
                    if cfg.max_parents is not None and len(parents[i]) >= cfg.max_parents:
                        continue
                    children[i].discard(j)
                    cyc = _reaches(children, i, j)
                    children[i].add(j)
                    if cyc:
                        continue
                    li = cache.local(i, parents[i] | {j})
                    cands.append((current - local[j] + lj - local[i] + li, n_arcs, "rev", i, j, ((j, lj), (i, li))))
                elif j not in parents[i]:
                    if (i, j) in cfg.forbidden:
                        continue
                    if cfg.max_parents is not None and len(parents[j]) >= cfg.max_parents:
                        continue
                    if _reaches(children, j, i):
                        continue
                    lj = cache.local(j, parents[j] | {i})
                    cands.append((current - local[j] + lj, n_arcs + 1, "add", i, j, ((j, lj),)))

        chosen = None
        chosen_rank = None
        top = None
        keyed = []
        for cand in cands:
            new_parents = _apply(parents, cand[2], cand[3], cand[4])
            new_key = _arc_key(new_parents)
            if new_key in tabu:
                continue
            keyed.append((cand, new_parents, new_key))
            if top is None or cand[0] > top:
                top = cand[0]
        if not keyed:
            break
        tol = 1e-9 * max(1.0, abs(top))
        for cand, new_parents, new_key in keyed:
            if cand[0] < top - tol:
                continue
            rank = (cand[1], new_key)
            if chosen_rank is None or rank < chosen_rank:
                chosen, chosen_rank = (cand, new_parents, new_key), rank

        cand, parents, key = chosen
        op, i, j = cand[2], cand[3], cand[4]
        if op == "del":
            children[i].discard(j)
        elif op == "add":
            children[i].add(j)
        else:
            children[i].discard(j)
            children[j].add(i)
        for node, val in cand[5]:
            local[node] = val
        current = sum(local)
        tabu.append(key)
        if trace is not None:
            trace.current.append(current)
            trace.moves.append((op, i, j))

        if current > best_score + 1e-9 * max(1.0, abs(best_score)):
            best_score = current
            best_parents = [set(p) for p in parents]
            stale = 0
        else:
            stale += 1
        if trace is not None:
            trace.best.append(best_score)
        if stale >= cfg.tabu_len:
            break

    return Dag(table.nodes, tuple(tuple(sorted(p)) for p in best_parents))


def _apply(parents: list[set[int]], op: str, i: int, j: int) -> list[set[int]]:
    new = list(parents)
    if op == "add":
        new[j] = parents[j] | {i}
    elif op == "del":
        new[j] = parents[j] - {i}
    else:
        new[j] = parents[j] - {i}
        new[i] = parents[i] | {j}
    return new


def to_dot(dag: Dag, name: str = "bn") -> str:
    """Graphviz rendering of the DAG."""
    lines = [f"digraph {name} {{"]
    for m in dag.nodes:
        lines.append(f'  "{m.name}";')
    for a, b in dag.arcs():
        lines.append(f'  "{dag.nodes[a].name}" -> "{dag.nodes[b].name}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_arc(text: str, names: Sequence[str]) -> tuple[int, int]:
    """Parse ``"A->B"`` into node indices."""
    if "->" not in text:
        raise ValueError(f"arc {text!r} must look like A->B")
    a, b = (s.strip() for s in text.split("->", 1))
    for s in (a, b):
        if s not in names:
            raise ValueError(f"unknown node {s!r} in arc {text!r}")
    return names.index(a), names.index(b)
