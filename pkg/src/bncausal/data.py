"""Encoded datasets of discrete variables.

Two views of the same data are used throughout the package:

* :class:`Dataset` holds the observational triplets ``(Y, T, X)``. Treatment and
  outcome are coded 0/1, covariate ``l`` is coded ``1..r_l``.
* :class:`NodeTable` is the generic matrix a Bayesian network is fitted on. Every
  column holds 0-based *state indices* (``code - 1`` for covariates, the code itself
  for the binary roles).
"""

from __future__ import annotations

import csv
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyArm,
    EmptyFile,
    MissingColumn,
    MissingValue,
    NonBinaryRole,
    RaggedRow,
    UnknownLevel,
)


@dataclass(frozen=True)
class VariableMeta:
    name: str
    arity: int
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        object.__setattr__(self, "labels", labels)
        if self.arity < 2:
            raise DataError(f"variable {self.name!r}: arity must be >= 2, got {self.arity}")
        if len(labels) != self.arity:
            raise DataError(f"variable {self.name!r}: {len(labels)} labels for arity {self.arity}")
        if len(set(labels)) != len(labels) or any(s == "" for s in labels):
            raise DataError(f"variable {self.name!r}: labels must be distinct and non-empty")

    @classmethod
    def binary(cls, name: str, labels: Sequence[str] = ("0", "1")) -> "VariableMeta":
        return cls(name, 2, tuple(labels))

    @classmethod
    def numbered(cls, name: str, arity: int) -> "VariableMeta":
        """Meta whose labels are the codes themselves, ``"1".."r"``."""
        return cls(name, arity, tuple(str(j) for j in range(1, arity + 1)))

    def to_dict(self) -> dict:
        return {"name": self.name, "arity": self.arity, "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariableMeta":
        return cls(d["name"], int(d["arity"]), tuple(d["labels"]))


def _frozen(a, dtype=np.int64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NodeTable:
    """Rows of 0-based state indices, one column per node."""

    codes: np.ndarray
    nodes: tuple[VariableMeta, ...]

    def __post_init__(self):
        codes = _frozen(self.codes)
        if codes.ndim != 2 or codes.shape[1] != len(self.nodes):
            raise DataError(f"code matrix shape {codes.shape} does not match {len(self.nodes)} nodes")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "nodes", tuple(self.nodes))
        if codes.size:
            bad = (codes < 0) | (codes >= self.arities[None, :])
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise DataError(f"state {codes[i, j]} out of range for node {self.nodes[j].name!r} (row {i})")

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def arities(self) -> np.ndarray:
        return np.array([m.arity for m in self.nodes], dtype=np.int64)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.nodes]


@dataclass(frozen=True)
class Dataset:
    """Observed triplets ``(Y_i, T_i, X_i)``; immutable after construction."""

    treatment: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    treatment_meta: VariableMeta = field(default_factory=lambda: VariableMeta.binary("T"))
    outcome_meta: VariableMeta = field(default_factory=lambda: VariableMeta.binary("Y"))
    covariate_meta: tuple[VariableMeta, ...] = ()

    def __post_init__(self):
        t = _frozen(self.treatment)
        y = _frozen(self.outcome)
        x = np.array(self.covariates, dtype=np.int64)
        if x.ndim == 1:
            x = x[:, None]
        if x.size == 0 and x.ndim < 2:
            x = x.reshape(len(t), 0)
        x = _frozen(x)
        meta = tuple(self.covariate_meta)
        if not meta:
            meta = tuple(
                VariableMeta.numbered(f"X{l + 1}", max(2, int(x[:, l].max()) if len(x) else 2))
                for l in range(x.shape[1])
            )
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "covariate_meta", meta)

        n = len(t)
        if n < 1:
            raise EmptyFile("dataset has no rows")
        if t.ndim != 1 or y.shape != t.shape or x.shape[0] != n:
            raise DataError("treatment, outcome and covariate columns must have the same length")
        if x.shape[1] != len(meta):
            raise DataError(f"{x.shape[1]} covariate columns but {len(meta)} covariate metas")
        for name, col in (("treatment", t), ("outcome", y)):
            if not np.isin(col, (0, 1)).all():
                raise NonBinaryRole(f"{name} codes must be 0/1")
        for l, m in enumerate(meta):
            col = x[:, l]
            if col.min() < 1 or col.max() > m.arity:
                raise DataError(f"covariate {m.name!r} has codes outside 1..{m.arity}")
        for arm in (0, 1):
            if not (t == arm).any():
                raise EmptyArm(arm)

    @property
    def n(self) -> int:
        return len(self.treatment)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(m.arity for m in self.covariate_meta)

    def node_table(self, include_outcome: bool = False) -> NodeTable:
        """Columns ``(T, X_1..X_L)`` and optionally ``Y`` last, as state indices."""
        cols = [self.treatment[:, None], self.covariates - 1]
        nodes = [self.treatment_meta, *self.covariate_meta]
        if include_outcome:
            cols.append(self.outcome[:, None])
            nodes.append(self.outcome_meta)
        return NodeTable(np.hstack(cols), tuple(nodes))

    def strata(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique covariate configurations and the stratum index of every row."""
        if self.n_covariates == 0:
            return np.zeros((1, 0), dtype=np.int64), np.zeros(self.n, dtype=np.int64)
        configs, inverse = np.unique(self.covariates, axis=0, return_inverse=True)
        return configs, inverse.reshape(-1)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.treatment[rows],
            self.outcome[rows],
            self.covariates[rows],
            self.treatment_meta,
            self.outcome_meta,
            self.covariate_meta,
        )

    def decoded_rows(self) -> list[list[str]]:
        """Rows as labels in ``(T, Y, X_1..X_L)`` column order."""
        out = []
        for i in range(self.n):
            row = [self.treatment_meta.labels[self.treatment[i]], self.outcome_meta.labels[self.outcome[i]]]
            row += [m.labels[self.covariates[i, l] - 1] for l, m in enumerate(self.covariate_meta)]
            out.append(row)
        return out


# ---------------------------------------------------------------------------
# CSV ingestion


def read_schema(schema) -> dict:
    """Accept a mapping or a path to a JSON schema file."""
    if isinstance(schema, Mapping):
        return dict(schema)
    with open(schema, encoding="utf-8") as fh:
        return json.load(fh)


def _encode_binary(name, values, levels):
    distinct = list(OrderedDict.fromkeys(values))
    if levels is not None:
        if len(levels) != 2:
            raise NonBinaryRole(f"column {name!r}: binary role needs exactly 2 declared levels")
        mapping = {str(levels[0]): 0, str(levels[1]): 1}
        labels = (str(levels[0]), str(levels[1]))
    else:
        mapping = {"0": 0, "1": 1}
        labels = ("0", "1")
    if len(distinct) > 2:
        raise NonBinaryRole(f"column {name!r} has {len(distinct)} distinct values; binary role expected")
    unknown = [v for v in distinct if v not in mapping]
    if unknown:
        raise NonBinaryRole(
            f"column {name!r}: value {unknown[0]!r} is not encodable to 0/1; declare 'levels' in the schema"
        )
    return np.array([mapping[v] for v in values], dtype=np.int64), VariableMeta.binary(name, labels)


def _encode_categorical(name, values, levels):
    if levels is None:
        labels = tuple(OrderedDict.fromkeys(values))
    else:
        labels = tuple(str(s) for s in levels)
        declared = set(labels)
        for i, v in enumerate(values):
            if v not in declared:
                raise UnknownLevel(f"column {name!r}, data row {i + 1}: value {v!r} not among declared levels")
    if len(labels) < 2:
        raise DataError(
            f"covariate {name!r} takes a single value; declare its levels in the schema or drop the column"
        )
    index = {lab: j + 1 for j, lab in enumerate(labels)}
    return np.array([index[v] for v in values], dtype=np.int64), VariableMeta(name, len(labels), labels)


def load_csv(path, schema) -> Dataset:
    """Read a CSV file into a validated :class:`Dataset`.

    ``schema`` names the ``treatment`` and ``outcome`` columns and may list the
    ``covariates`` (default: every other column, in file order) and explicit
    ``levels`` per column. Without declared levels, covariate codes follow
    first-appearance order, and binary roles must literally read ``0``/``1``.
    """
    schema = read_schema(schema)
    for key in ("treatment", "outcome"):
        if key not in schema:
            raise DataError(f"schema lacks required key {key!r}")
    levels = schema.get("levels", {}) or {}

    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]  # tolerate a trailing blank line
    if not rows:
        raise EmptyFile(f"{path}: no header row")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise EmptyFile(f"{path}: header only, no data rows")
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise RaggedRow(f"{path}: data row {i + 1} has {len(r)} fields, header has {len(header)}")

    t_name, y_name = schema["treatment"], schema["outcome"]
    cov_names = schema.get("covariates")
    if cov_names is None:
        cov_names = [h for h in header if h not in (t_name, y_name)]
    for name in [t_name, y_name, *cov_names]:
        if name not in header:
            raise MissingColumn(f"column {name!r} named in schema is absent from {path}")

    def column(name):
        j = header.index(name)
        vals = [r[j].strip() for r in body]
        for i, v in enumerate(vals):
            if v == "" or v.upper() == "NA":
                raise MissingValue(f"column {name!r}, data row {i + 1}: missing value")
        return vals

    t, t_meta = _encode_binary(t_name, column(t_name), levels.get(t_name))
    y, y_meta = _encode_binary(y_name, column(y_name), levels.get(y_name))
    cols, metas = [], []
    for name in cov_names:
        c, m = _encode_categorical(name, column(name), levels.get(name))
        cols.append(c)
        metas.append(m)
    x = np.column_stack(cols) if cols else np.zeros((len(body), 0), dtype=np.int64)
    return Dataset(t, y, x, t_meta, y_meta, tuple(metas))


def write_csv(ds: Dataset, path) -> None:
    """Write labels with header ``T, Y, X_1..X_L``; reloadable with :func:`schema_for`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([ds.treatment_meta.name, ds.outcome_meta.name, *(m.name for m in ds.covariate_meta)])
        w.writerows(ds.decoded_rows())


def schema_for(ds: Dataset) -> dict:
    """A schema that reproduces ``ds``'s encoding exactly when its CSV is reloaded."""
    levels = {m.name: list(m.labels) for m in (ds.treatment_meta, ds.outcome_meta, *ds.covariate_meta)}
    return {
        "treatment": ds.treatment_meta.name,
        "outcome": ds.outcome_meta.name,
        "covariates": [m.name for m in ds.covariate_meta],
        "levels": levels,
    }


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class StratumCount:
    config: tuple[int, ...]
    treated: int
    control: int


@dataclass(frozen=True)
class PositivityReport:
    strata: tuple[StratumCount, ...]
    violations: tuple[tuple[int, ...], ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self, ds: Dataset | None = None) -> dict:
        return {
            "n_strata": len(self.strata),
            "strata": [
                {"config": list(s.config), "treated": s.treated, "control": s.control} for s in self.strata
            ],
            "violations": [list(v) for v in self.violations],
        }


def validate(ds: Dataset) -> PositivityReport:
    """Treated/control counts per observed covariate configuration.

    Strata with an empty arm are finite-sample positivity violations.
    """
    configs, inverse = ds.strata()
    treated = np.bincount(inverse, weights=ds.treatment, minlength=len(configs)).astype(np.int64)
    total = np.bincount(inverse, minlength=len(configs))
    strata = []
    violations = []
    for s, cfg in enumerate(configs):
        key = tuple(int(c) for c in cfg)
        rec = StratumCount(key, int(treated[s]), int(total[s] - treated[s]))
        strata.append(rec)
        if rec.treated == 0 or rec.control == 0:
            violations.append(key)
    return PositivityReport(tuple(strata), tuple(violations))
