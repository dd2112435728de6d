"""Exact limits of the IPW estimators under a misspecified propensity model.

Everything here enumerates a finite covariate space, so true parameters and
asymptotic biases are computed exactly rather than simulated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .bn import BayesNet, Dag, conditional_rows, enumerate_configs, fit_mle, joint_prob_rows
from .data import Dataset, VariableMeta
from .errors import BnCausalError, EmptyArm
from .estimators import PsVector, propensity_scores, theta_hajek, theta_ht


@dataclass(frozen=True)
class DiscreteDgp:
    """Covariate distribution, true propensity and outcome regressions over a finite ``X``-space.

    ``cells`` holds 1-based covariate codes, one row per configuration with
    positive probability; ``ps[c] = P(T=1 | x_c)`` and ``theta{k}[c] = P(Y_(k)=1 | x_c)``.
    """

    covariates: tuple[VariableMeta, ...]
    cells: np.ndarray
    prob: np.ndarray
    ps: np.ndarray
    theta0: np.ndarray
    theta1: np.ndarray

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int64).reshape(len(self.prob), len(self.covariates))
        arrs = {k: np.array(getattr(self, k), dtype=float) for k in ("prob", "ps", "theta0", "theta1")}
        for a in (cells, *arrs.values()):
            a.setflags(write=False)
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "cells", cells)
        for k, a in arrs.items():
            object.__setattr__(self, k, a)
            if a.shape != (len(cells),):
                raise ValueError(f"{k} must have one entry per cell")
        if abs(math.fsum(arrs["prob"].tolist()) - 1.0) > 1e-12 or (arrs["prob"] < 0).any():
            raise ValueError("covariate probabilities must be non-negative and sum to 1")
        if not ((arrs["ps"] > 0) & (arrs["ps"] < 1)).all():
            raise ValueError("true propensity scores must lie strictly inside (0, 1)")
        for k in ("theta0", "theta1"):
            if ((arrs[k] < 0) | (arrs[k] > 1)).any():
                raise ValueError(f"{k} must lie in [0, 1]")
        ar = np.array([m.arity for m in self.covariates])
        if len(cells) and ((cells < 1) | (cells > ar[None, :])).any():
            raise ValueError("cell codes out of range")
        if len({tuple(c) for c in cells.tolist()}) != len(cells):
            raise ValueError("duplicate covariate cells")

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(m.arity for m in self.covariates)

    def theta(self, k: int) -> np.ndarray:
        return self.theta1 if k == 1 else self.theta0

    def ps_arm(self, k: int) -> np.ndarray:
        return self.ps if k == 1 else 1.0 - self.ps

    @property
    def nodes(self) -> tuple[VariableMeta, ...]:
        """Node metas of the ``(T, X_1..X_L)`` network view."""
        return (VariableMeta.binary("T"), *self.covariates)

    def joint_tx(self) -> np.ndarray:
        """Dense ``P(T=t, X=x)`` with axes ``(T, X_1, ..., X_L)`` in state indices."""
        joint = np.zeros((2, *self.arities))
        idx = tuple((self.cells - 1).T)
        joint[(0, *idx)] = self.prob * (1 - self.ps)
        joint[(1, *idx)] = self.prob * self.ps
        return joint

    def sample(self, n: int, rng: np.random.Generator) -> tuple[Dataset, np.ndarray]:
        """Draw ``n`` units; returns the dataset and each row's cell index."""
        cell = rng.choice(len(self.prob), size=n, p=self.prob)
        t = (rng.random(n) < self.ps[cell]).astype(np.int64)
        y1 = rng.random(n) < self.theta1[cell]
        y0 = rng.random(n) < self.theta0[cell]
        y = np.where(t == 1, y1, y0).astype(np.int64)
        return Dataset(t, y, self.cells[cell], covariate_meta=self.covariates), cell

    @classmethod
    def from_bn(
        cls,
        bn: BayesNet,
        outcome: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
        treatment_node: int = 0,
    ) -> "DiscreteDgp":
        """Covariate law and propensity implied by a network over ``(T, X)``.

        ``outcome`` maps the ``(K, L)`` matrix of 1-based covariate cells to
        ``(theta0, theta1)`` arrays.
        """
        if treatment_node != 0:
            raise ValueError("the treatment must be node 0")
        xs = enumerate_configs(bn.dag.arities[1:])
        k = len(xs)
        p = np.empty((2, k))
        for t in (0, 1):
            codes = np.column_stack([np.full(k, t), xs])
            p[t] = joint_prob_rows(bn, codes)
        px = p[0] + p[1]
        keep = px > 0
        cells = xs[keep] + 1
        prob = px[keep] / math.fsum(px[keep].tolist())
        th0, th1 = outcome(cells)
        return cls(tuple(bn.nodes[1:]), cells, prob, p[1][keep] / px[keep], th0, th1)

    def to_dict(self) -> dict:
        return {
            "covariates": [m.to_dict() for m in self.covariates],
            "cells": [
                {
                    "x": [int(v) for v in self.cells[c]],
                    "prob": float(self.prob[c]),
                    "ps": float(self.ps[c]),
                    "theta0": float(self.theta0[c]),
                    "theta1": float(self.theta1[c]),
                }
                for c in range(len(self.prob))
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiscreteDgp":
        covs = tuple(VariableMeta.from_dict(m) for m in d["covariates"])
        cells = d["cells"]
        return cls(
            covs,
            np.array([c["x"] for c in cells], dtype=np.int64).reshape(len(cells), len(covs)),
            [c["prob"] for c in cells],
            [c["ps"] for c in cells],
            [c["theta0"] for c in cells],
            [c["theta1"] for c in cells],
        )


def true_theta(dgp: DiscreteDgp) -> tuple[float, float, float]:
    """``theta_k = sum_x P(x) theta_k(x)`` and ``Delta = theta_1 - theta_0``."""
    th0 = math.fsum((dgp.prob * dgp.theta0).tolist())
    th1 = math.fsum((dgp.prob * dgp.theta1).tolist())
    return th0, th1, th1 - th0


@dataclass(frozen=True)
class WorkingPsModel:
    """Limit ``p_1*(x)`` of a working propensity model, one value per DGP cell."""

    p1: np.ndarray
    dag: Dag | None = None
    bn: BayesNet | None = None

    def __post_init__(self):
        p1 = np.array(self.p1, dtype=float)
        p1.setflags(write=False)
        object.__setattr__(self, "p1", p1)

    def arm(self, k: int) -> np.ndarray:
        return self.p1 if k == 1 else 1.0 - self.p1

    def delta(self) -> float:
        """Largest ``d`` with ``d <= p_k*(x) <= 1 - d`` for every cell and arm."""
        return float(min(self.p1.min(), (1 - self.p1).min()))


def kl_project(dgp: DiscreteDgp, dag: Dag) -> WorkingPsModel:
    """Large-sample limit of the network MLE on ``dag`` and the propensity it implies.

    Each CPT becomes the true conditional distribution of the node given the
    parents ``dag`` assigns it. Parent configurations of probability zero get a
    uniform row (they never influence any cell of positive probability).
    """
    nodes = dgp.nodes
    if tuple(m.arity for m in dag.nodes) != tuple(m.arity for m in nodes):
        raise ValueError("DAG arities do not match the DGP's (T, X) nodes")
    joint = dgp.joint_tx()
    m = joint.ndim
    tables = []
    for l in range(m):
        pa = list(dag.parents[l])
        keep = pa + [l]
        drop = tuple(a for a in range(m) if a not in keep)
        marg = joint.sum(axis=drop) if drop else joint
        # remaining axes are in ascending order; move to (pa..., l)
        order = sorted(keep)
        marg = np.transpose(marg, [order.index(a) for a in keep])
        r = joint.shape[l]
        marg = marg.reshape(-1, r)
        tot = marg.sum(axis=1, keepdims=True)
        tab = np.where(tot > 0, marg / np.where(tot > 0, tot, 1.0), 1.0 / r)
        tables.append(tab)
    bn = BayesNet.from_tables(Dag(nodes, dag.parents), tables)
    codes = np.column_stack([np.zeros(len(dgp.cells), dtype=np.int64), dgp.cells - 1])
    p1 = conditional_rows(bn, codes, 0)[:, 1]
    return WorkingPsModel(p1, dag, bn)


def asymptotic_bias(dgp: DiscreteDgp, wm: WorkingPsModel, estimator: str = "H", k: int = 1) -> float:
    """Probability limit of ``theta_hat_k - theta_k`` under the working model.

    HT: ``E[theta_k(X) (r(X) - 1)]``; H: ``E[(theta_k(X) - theta_k)(r(X) - 1)] / E[r(X)]``,
    where ``r = p_k / p_k*``.
    """
    if not (wm.p1.shape == dgp.ps.shape):
        raise ValueError("working model must give one propensity per DGP cell")
    if wm.delta() <= 0:
        raise ValueError("working propensity must be bounded away from 0 and 1")
    r = dgp.ps_arm(k) / wm.arm(k)
    th_x = dgp.theta(k)
    if estimator.upper() == "HT":
        return math.fsum((dgp.prob * th_x * (r - 1)).tolist())
    if estimator.upper() != "H":
        raise ValueError(f"unknown estimator {estimator!r}")
    th = math.fsum((dgp.prob * th_x).tolist())
    num = math.fsum((dgp.prob * (th_x - th) * (r - 1)).tolist())
    den = math.fsum((dgp.prob * r).tolist())
    return num / den


def hajek_bound(dgp: DiscreteDgp, k: int = 1) -> float:
    """``sup_x |theta_k(x) - theta_k|`` over cells of positive probability."""
    th = dgp.theta(k)
    mean = math.fsum((dgp.prob * th).tolist())
    return float(np.abs(th[dgp.prob > 0] - mean).max())


@dataclass(frozen=True)
class LimitRow:
    n: int
    runs: int
    failed: int
    mean_error: float
    se: float
    limit: float
    distance: float


def empirical_limit_check(
    dgp: DiscreteDgp,
    wm: WorkingPsModel,
    estimator: str = "H",
    ns: Sequence[int] = (1000, 10000),
    runs: int = 200,
    seed: int = 0,
    k: int = 1,
    refit: bool = False,
) -> list[LimitRow]:
    """Monte Carlo mean of ``theta_hat_k - theta_k`` per sample size, next to its exact limit.

    By default the propensity used in each run is the fixed working limit
    ``p_k*``; with ``refit=True`` the working DAG's MLE is re-estimated per run.
    Run ``j`` at size ``n`` draws from ``SeedSequence([seed, n, j])``.
    """
    est = theta_hajek if estimator.upper() == "H" else theta_ht
    theta_k = true_theta(dgp)[k]
    limit = asymptotic_bias(dgp, wm, estimator, k)
    rows = []
    for n in ns:
        errs = []
        failed = 0
        for j in range(runs):
            rng = np.random.default_rng(np.random.SeedSequence([seed, n, j]))
            try:
                ds, cell = dgp.sample(n, rng)
                if refit:
                    if wm.dag is None:
                        raise ValueError("refit requires a DAG-shaped working model")
                    ps = propensity_scores(fit_mle(wm.dag, ds), ds, delta_clip=0.0)
                else:
                    ps = PsVector.from_raw(wm.p1[cell], 0.0)
                errs.append(est(ds, ps)[k] - theta_k)
            except (EmptyArm, BnCausalError):
                failed += 1
        e = np.asarray(errs)
        mean = math.fsum(e.tolist()) / len(e) if len(e) else float("nan")
        se = float(e.std(ddof=1) / math.sqrt(len(e))) if len(e) > 1 else float("nan")
        rows.append(LimitRow(int(n), runs, failed, mean, se, limit, abs(mean - limit)))
    return rows


def write_limit_table(rows: Sequence[LimitRow], path_or_fh) -> None:
    fields = ["n", "runs", "failed", "mean_error", "se", "limit", "distance"]

    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r.n, r.runs, r.failed, repr(r.mean_error), repr(r.se), repr(r.limit), repr(r.distance)])

    if hasattr(path_or_fh, "write"):
        _write(path_or_fh)
    else:
        with open(path_or_fh, "w", newline="", encoding="utf-8") as fh:
            _write(fh)


def load_dgp(path) -> DiscreteDgp:
    with open(path, encoding="utf-8") as fh:
        return DiscreteDgp.from_dict(json.load(fh))


def working_model_from_dict(dgp: DiscreteDgp, d: Mapping) -> WorkingPsModel:
    """``{"ps": [...]}`` per cell, or ``{"parents": {"T": ["X1"], ...}}`` projected exactly."""
    if "ps" in d:
        return WorkingPsModel(np.asarray(d["ps"], dtype=float))
    names = [m.name for m in dgp.nodes]
    parents = [[] for _ in names]
    for child, ps in d["parents"].items():
        parents[names.index(child)] = [names.index(p) for p in ps]
    return kl_project(dgp, Dag(dgp.nodes, tuple(tuple(p) for p in parents)))
