"""Discrete Bayesian networks: structure, maximum-likelihood CPTs, queries, sampling.

All assignments handled here are 0-based state indices (see :class:`~bncausal.data.NodeTable`).
A CPT is stored as a ``(q, r)`` array whose row is the mixed-radix index of the
parent configuration, first-listed (lowest-numbered) parent most significant;
``table.ravel()`` is the portable flat layout written to model files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, NodeTable, VariableMeta
from .errors import (
    ArityMismatch,
    CyclicGraph,
    UndefinedCptRow,
    UnobservedParentConfig,
    ZeroEvidenceProbability,
)

MODEL_FORMAT = "bn-causal/1"


def topological_order(parents: Sequence[Sequence[int]]) -> list[int] | None:
    """Kahn's algorithm, smallest ready index first; ``None`` when a cycle exists."""
    m = len(parents)
    indeg = [len(set(p)) for p in parents]
    children = [[] for _ in range(m)]
    for child, ps in enumerate(parents):
        for p in set(ps):
            if p == child:
                return None
            children[p].append(child)
    ready = sorted(i for i in range(m) if indeg[i] == 0)
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    return order if len(order) == m else None


@dataclass(frozen=True)
class Dag:
    nodes: tuple[VariableMeta, ...]
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if isinstance(self.parents, Mapping):
            raw = [self.parents.get(i, ()) for i in range(len(nodes))]
        else:
            raw = list(self.parents)
        if len(raw) != len(nodes):
            raise ValueError(f"{len(raw)} parent lists for {len(nodes)} nodes")
        parents = []
        for i, ps in enumerate(raw):
            ps = tuple(int(p) for p in ps)
            if len(set(ps)) != len(ps):
                raise ValueError(f"node {i}: duplicate parents {ps}")
            if any(p < 0 or p >= len(nodes) for p in ps):
                raise ValueError(f"node {i}: parent index out of range in {ps}")
            if i in ps:
                raise CyclicGraph(f"node {i} is its own parent")
            parents.append(tuple(sorted(ps)))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "parents", tuple(parents))
        if topological_order(self.parents) is None:
            raise CyclicGraph("parent sets contain a directed cycle")

    @classmethod
    def empty(cls, nodes: Sequence[VariableMeta]) -> "Dag":
        return cls(tuple(nodes), tuple(() for _ in nodes))

    @classmethod
    def from_arcs(cls, nodes: Sequence[VariableMeta], arcs) -> "Dag":
        parents = [[] for _ in nodes]
        for a, b in arcs:
            parents[b].append(a)
        return cls(tuple(nodes), tuple(tuple(p) for p in parents))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(m.arity for m in self.nodes)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.nodes]

    def arcs(self) -> list[tuple[int, int]]:
        return sorted((p, c) for c, ps in enumerate(self.parents) for p in ps)

    def children(self, node: int) -> list[int]:
        return [c for c, ps in enumerate(self.parents) if node in ps]

    def topological_order(self) -> list[int]:
        return topological_order(self.parents)

    def markov_blanket_families(self, node: int) -> list[int]:
        """Nodes whose CPT factor mentions ``node``: itself and its children."""
        return [node, *self.children(node)]

    def to_dict(self) -> dict:
        return {
            "nodes": [m.to_dict() for m in self.nodes],
            "parents": [list(p) for p in self.parents],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Dag":
        return cls(tuple(VariableMeta.from_dict(m) for m in d["nodes"]), tuple(tuple(p) for p in d["parents"]))


def parent_strides(parent_arities: Sequence[int]) -> np.ndarray:
    strides = np.ones(len(parent_arities), dtype=np.int64)
    for j in range(len(parent_arities) - 2, -1, -1):
        strides[j] = strides[j + 1] * parent_arities[j + 1]
    return strides


def parent_index(codes: np.ndarray, parents: Sequence[int], arities: Sequence[int]) -> np.ndarray:
    """Mixed-radix parent-configuration index per row (first parent most significant)."""
    if not parents:
        return np.zeros(codes.shape[0], dtype=np.int64)
    strides = parent_strides([arities[p] for p in parents])
    return codes[:, list(parents)] @ strides


def unravel_parent_config(index: int, parent_arities: Sequence[int]) -> tuple[int, ...]:
    if not parent_arities:
        return ()
    return tuple(int(v) for v in np.unravel_index(int(index), tuple(parent_arities)))


@dataclass(frozen=True)
class Cpt:
    node: int
    arity: int
    parents: tuple[int, ...]
    parent_arities: tuple[int, ...]
    table: np.ndarray
    observed: np.ndarray
    counts: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.table.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.table.ravel()

    @property
    def parent_counts(self) -> np.ndarray | None:
        return None if self.counts is None else self.counts.sum(axis=1)

    def check_rows(self, rows: np.ndarray, exc=UnobservedParentConfig, row_ids=None) -> None:
        bad = ~self.observed[rows]
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            row = k if row_ids is None else int(row_ids[k])
            raise exc(self.node, unravel_parent_config(rows[k], self.parent_arities), row)


@dataclass(frozen=True)
class BayesNet:
    dag: Dag
    cpts: tuple[Cpt, ...]
    smoothing: float | None = None

    @property
    def nodes(self) -> tuple[VariableMeta, ...]:
        return self.dag.nodes

    @property
    def n_nodes(self) -> int:
        return self.dag.n_nodes

    @classmethod
    def from_tables(cls, dag: Dag, tables: Sequence) -> "BayesNet":
        """Build a network from explicit conditional tables (rows in mixed-radix order)."""
        cpts = []
        ar = dag.arities
        for l, tab in enumerate(tables):
            pa = dag.parents[l]
            pa_ar = tuple(ar[p] for p in pa)
            q = int(np.prod(pa_ar, dtype=np.int64)) if pa else 1
            tab = np.asarray(tab, dtype=float).reshape(q, ar[l])
            if (tab < 0).any() or (tab > 1).any() or not np.allclose(tab.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError(f"node {l}: CPT rows must be probability vectors")
            tab = tab.copy()
            tab.setflags(write=False)
            cpts.append(Cpt(l, ar[l], pa, pa_ar, tab, np.ones(q, dtype=bool), None))
        return cls(dag, tuple(cpts))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            **self.dag.to_dict(),
            "smoothing": self.smoothing,
            "cpts": [
                {
                    "node": c.node,
                    "parents": list(c.parents),
                    "table": [float(v) for v in c.flat],
                    "observed": [bool(v) for v in c.observed],
                    "counts": None if c.counts is None else [int(v) for v in c.counts.ravel()],
                }
                for c in self.cpts
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "BayesNet":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}; expected {MODEL_FORMAT!r}")
        dag = Dag.from_dict(d)
        ar = dag.arities
        cpts = []
        for l, c in enumerate(d["cpts"]):
            pa = dag.parents[l]
            if tuple(c["parents"]) != pa or c["node"] != l:
                raise ValueError(f"CPT {l} does not match the DAG's parent set")
            pa_ar = tuple(ar[p] for p in pa)
            q = int(np.prod(pa_ar, dtype=np.int64)) if pa else 1
            table = np.asarray(c["table"], dtype=float).reshape(q, ar[l])
            observed = np.asarray(c["observed"], dtype=bool)
            counts = None if c.get("counts") is None else np.asarray(c["counts"], dtype=np.int64).reshape(q, ar[l])
            for a in (table, observed) + (() if counts is None else (counts,)):
                a.setflags(write=False)
            cpts.append(Cpt(l, ar[l], pa, pa_ar, table, observed, counts))
        return cls(dag, tuple(cpts), d.get("smoothing"))

    @classmethod
    def from_json(cls, text: str) -> "BayesNet":
        return cls.from_dict(json.loads(text))


def as_table(data) -> NodeTable:
    if isinstance(data, Dataset):
        return data.node_table()
    return data


def _check_arities(dag: Dag, table: NodeTable) -> None:
    if tuple(int(a) for a in table.arities) != dag.arities:
        raise ArityMismatch(f"data arities {tuple(table.arities)} do not match DAG arities {dag.arities}")


def family_counts(codes: np.ndarray, node: int, parents: Sequence[int], arities: Sequence[int]) -> np.ndarray:
    """Contingency counts ``n(x_l, x_pa(l))`` as a ``(q, r_l)`` array."""
    r = int(arities[node])
    q = int(np.prod([arities[p] for p in parents], dtype=np.int64)) if parents else 1
    idx = parent_index(codes, parents, arities) * r + codes[:, node]
    return np.bincount(idx, minlength=q * r).reshape(q, r)


def fit_mle(dag: Dag, data, smoothing: float | None = None) -> BayesNet:
    """Fit every CPT by empirical conditional proportions.

    Parent configurations absent from the data have no MLE; they are flagged
    unobserved and any later query that needs them raises. With ``smoothing=a``
    every cell gets ``a`` pseudo-counts instead (Laplace for ``a=1``).
    """
    table = as_table(data)
    _check_arities(dag, table)
    ar = dag.arities
    cpts = []
    for l in range(dag.n_nodes):
        pa = dag.parents[l]
        counts = family_counts(table.codes, l, pa, ar)
        tot = counts.sum(axis=1)
        if smoothing is None:
            observed = tot > 0
            probs = np.zeros(counts.shape, dtype=float)
            probs[observed] = counts[observed] / tot[observed, None]
        else:
            if smoothing <= 0:
                raise ValueError("smoothing must be positive")
            observed = np.ones(len(tot), dtype=bool)
            probs = (counts + smoothing) / (tot[:, None] + smoothing * ar[l])
        for a in (counts, probs, observed):
            a.setflags(write=False)
        cpts.append(Cpt(l, ar[l], pa, tuple(ar[p] for p in pa), probs, observed, counts))
    return BayesNet(dag, tuple(cpts), smoothing)


def _factor(bn: BayesNet, codes: np.ndarray, node: int, row_ids=None) -> np.ndarray:
    cpt = bn.cpts[node]
    rows = parent_index(codes, cpt.parents, bn.dag.arities)
    cpt.check_rows(rows, row_ids=row_ids)
    return cpt.table[rows, codes[:, node]]


def joint_prob_rows(bn: BayesNet, codes) -> np.ndarray:
    """Factorised joint probability of every row of a state-index matrix."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    _check_config(bn, codes)
    p = np.ones(codes.shape[0])
    for l in range(bn.n_nodes):
        p = p * _factor(bn, codes, l)
    return p


def _check_config(bn: BayesNet, codes: np.ndarray) -> None:
    ar = np.asarray(bn.dag.arities)
    if codes.shape[1] != len(ar):
        raise ArityMismatch(f"assignment covers {codes.shape[1]} nodes, network has {len(ar)}")
    if ((codes < 0) | (codes >= ar[None, :])).any():
        raise ArityMismatch("state index out of range")


def joint_prob(bn: BayesNet, config: Sequence[int]) -> float:
    return float(joint_prob_rows(bn, np.asarray(config, dtype=np.int64)[None, :])[0])


def conditional_rows(bn: BayesNet, codes, target: int, row_ids=None, strict: bool = True) -> np.ndarray:
    """``P(target = v | all other nodes)`` for every row and every state ``v``.

    Only the factors that mention ``target`` (its own CPT and its children's) are
    evaluated; every other factor is common to numerator and denominator.
    Returns an ``(n, r_target)`` array. With ``strict=False`` rows that touch an
    unobserved CPT row or have zero evidence probability come back as NaN
    instead of raising.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    _check_config(bn, codes)
    fams = bn.dag.markov_blanket_families(target)
    r = bn.dag.arities[target]
    ar = bn.dag.arities
    work = codes.copy()
    n = codes.shape[0]
    scores = np.empty((n, r))
    ok = np.ones(n, dtype=bool)
    ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
    for v in range(r):
        work[:, target] = v
        p = np.ones(n)
        for l in fams:
            cpt = bn.cpts[l]
            rows = parent_index(work, cpt.parents, ar)
            if strict:
                cpt.check_rows(rows, row_ids=ids)
            else:
                ok &= cpt.observed[rows]
            p = p * cpt.table[rows, work[:, l]]
        scores[:, v] = p
    denom = scores.sum(axis=1)
    zero = denom <= 0
    if strict and zero.any():
        raise ZeroEvidenceProbability(int(ids[np.flatnonzero(zero)[0]]))
    ok &= ~zero
    out = np.full((n, r), np.nan)
    out[ok] = scores[ok] / denom[ok, None]
    return out


def conditional_prob(bn: BayesNet, target: int, value: int, evidence) -> float:
    """``P(target = value | evidence)`` with evidence on every other node.

    ``evidence`` is either a full-length state sequence (the target entry is
    ignored) or a mapping ``node -> state`` covering all other nodes.
    """
    m = bn.n_nodes
    if isinstance(evidence, Mapping):
        missing = set(range(m)) - {target} - set(evidence)
        if missing:
            raise ValueError(f"evidence lacks nodes {sorted(missing)}")
        config = [0 if i == target else int(evidence[i]) for i in range(m)]
    else:
        config = [int(v) for v in evidence]
        if len(config) != m:
            raise ValueError(f"evidence must cover {m} nodes")
        config[target] = 0
    return float(conditional_rows(bn, np.asarray(config)[None, :], target)[0, value])


def sample(bn: BayesNet, n: int, seed: int) -> NodeTable:
    """Ancestral sampling of ``n`` i.i.d. rows with a private generator."""
    rng = np.random.default_rng(seed)
    return sample_with(bn, n, rng)


def sample_with(bn: BayesNet, n: int, rng: np.random.Generator) -> NodeTable:
    for cpt in bn.cpts:
        cpt.check_rows(np.arange(cpt.n_rows), exc=UndefinedCptRow)
    codes = np.zeros((n, bn.n_nodes), dtype=np.int64)
    ar = bn.dag.arities
    for l in bn.dag.topological_order():
        cpt = bn.cpts[l]
        rows = parent_index(codes, cpt.parents, ar)
        cum = np.cumsum(cpt.table, axis=1)[rows]
        u = rng.random(n)
        codes[:, l] = np.minimum((u[:, None] >= cum).sum(axis=1), ar[l] - 1)
    return NodeTable(codes, bn.nodes)


@dataclass(frozen=True)
class LogLikelihood:
    """Log-likelihood value; ``-inf`` with the first offending row when some row has probability 0."""

    value: float
    zero_row: int | None = None

    @property
    def is_finite(self) -> bool:
        return self.zero_row is None

    def __float__(self) -> float:
        return self.value


def log_likelihood(bn: BayesNet, data) -> LogLikelihood:
    """``sum_i log p(x_i)``, accumulated factor by factor in log space.

    Rows that hit an unobserved CPT row count as probability zero.
    """
    table = as_table(data)
    _check_arities(bn.dag, table)
    codes = table.codes
    ar = bn.dag.arities
    total = 0.0
    first_zero = None
    for l in range(bn.n_nodes):
        cpt = bn.cpts[l]
        rows = parent_index(codes, cpt.parents, ar)
        p = np.where(cpt.observed[rows], cpt.table[rows, codes[:, l]], 0.0)
        zero = p <= 0
        if zero.any():
            i = int(np.flatnonzero(zero)[0])
            first_zero = i if first_zero is None else min(first_zero, i)
            continue
        total += float(np.log(p).sum())
    if first_zero is not None:
        return LogLikelihood(-math.inf, first_zero)
    return LogLikelihood(total)


def enumerate_configs(arities: Sequence[int]) -> np.ndarray:
    """Every joint state assignment, last node varying fastest."""
    grids = np.meshgrid(*[np.arange(a) for a in arities], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
