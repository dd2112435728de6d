"""Monte Carlo harness: BN-generated ``(T, X)``, logistic potential outcomes, coverage and rejection rates.

Run ``j`` of a configuration draws all of its randomness from
``numpy.random.SeedSequence([master_seed, j])``; runs share no generator state,
and aggregation folds results in run order, so outputs do not depend on how
runs are scheduled across workers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bn import BayesNet, Dag, conditional_rows, sample_with
from .data import Dataset, VariableMeta
from .errors import BnCausalError
from .estimators import (
    PsVector,
    ate_test,
    estimate_propensity,
    outcome_probs,
)
from .misspec import DiscreteDgp, true_theta
from .structure import TabuConfig

log = logging.getLogger(__name__)

PS_METHODS = ("bn-aic", "bn-bic", "saturated", "true-ps")
ESTIMATORS = ("H", "HT")


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------------------
# Frozen DGP: treatment plus six clinical-style covariates.

FROZEN_NAMES = ("NEOadjHT", "age", "bmi", "cci", "bxgg", "clinstage", "tpsa")
FROZEN_ARITIES = (2, 2, 2, 2, 3, 4, 5)
# node index -> parents; treatment depends on age, biopsy grade and clinical stage
FROZEN_PARENTS = ((1, 4, 5), (), (), (1, 2), (6,), (6,), ())

FROZEN_ALPHA0 = -1.0
FROZEN_ALPHA1 = 0.43
# one coefficient per non-baseline covariate level, covariates in node order
FROZEN_BETA = (
    0.3,  # age=2
    0.2,  # bmi=2
    0.4,  # cci=2
    0.5, 0.9,  # bxgg=2,3
    0.3, 0.6, 0.9,  # clinstage=2..4
    0.2, 0.4, 0.6, 0.8,  # tpsa=2..5
)


def _frozen_treatment_cpt() -> np.ndarray:
    rows = []
    for age in range(2):
        for bxgg in range(3):
            for stage in range(4):
                p = round(float(_logistic(-2.0 + 0.6 * age + 0.7 * bxgg + 0.5 * stage)), 4)
                rows.append([1 - p, p])
    return np.array(rows)


def frozen_dgp_bn() -> BayesNet:
    """Seven-node network over (treatment, age, bmi, cci, bxgg, clinstage, tpsa)."""
    nodes = tuple(
        VariableMeta.binary(nm) if ar == 2 and i == 0 else VariableMeta.numbered(nm, ar)
        for i, (nm, ar) in enumerate(zip(FROZEN_NAMES, FROZEN_ARITIES))
    )
    dag = Dag(nodes, FROZEN_PARENTS)
    tables = [
        _frozen_treatment_cpt(),
        [0.45, 0.55],
        [0.6, 0.4],
        [[0.85, 0.15], [0.75, 0.25], [0.6, 0.4], [0.45, 0.55]],
        [[0.6, 0.3, 0.1], [0.5, 0.35, 0.15], [0.4, 0.4, 0.2], [0.3, 0.4, 0.3], [0.2, 0.4, 0.4]],
        [
            [0.55, 0.3, 0.1, 0.05],
            [0.45, 0.35, 0.15, 0.05],
            [0.35, 0.35, 0.2, 0.1],
            [0.25, 0.3, 0.3, 0.15],
            [0.15, 0.25, 0.35, 0.25],
        ],
        [0.15, 0.3, 0.25, 0.2, 0.1],
    ]
    return BayesNet.from_tables(dag, tables)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    dgp_bn: BayesNet
    alpha0: float
    alpha1: float
    beta: tuple[float, ...]
    n: int
    runs: int
    master_seed: int
    ps_method: str = "bn-bic"
    estimator: str = "H"
    alpha: float = 0.05
    delta_clip: float = 0.01
    tabu: TabuConfig = field(default_factory=TabuConfig)
    smoothing: float | None = None
    outcome_method: str = "bn"

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "estimator", self.estimator.upper())
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.n < 50:
            raise ValueError("n must be >= 50")
        if self.ps_method not in PS_METHODS:
            raise ValueError(f"ps_method must be one of {PS_METHODS}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.outcome_method not in ("bn", "saturated"):
            raise ValueError("outcome_method must be 'bn' or 'saturated'")
        n_ind = sum(m.arity - 1 for m in self.dgp_bn.nodes[1:])
        if len(self.beta) != n_ind:
            raise ValueError(f"beta needs {n_ind} coefficients (one per non-baseline covariate level)")

    @property
    def score(self) -> str:
        return "aic" if self.ps_method == "bn-aic" else "bic"

    def to_dict(self) -> dict:
        return {
            "dgp_bn": self.dgp_bn.to_dict(),
            "alpha0": self.alpha0,
            "alpha1": self.alpha1,
            "beta": list(self.beta),
            "n": self.n,
            "runs": self.runs,
            "master_seed": self.master_seed,
            "ps_method": self.ps_method,
            "estimator": self.estimator,
            "alpha": self.alpha,
            "delta_clip": self.delta_clip,
            "tabu": {
                "tabu_len": self.tabu.tabu_len,
                "max_iter": self.tabu.max_iter,
                "seed": self.tabu.seed,
            },
            "smoothing": self.smoothing,
            "outcome_method": self.outcome_method,
        }


def frozen_config(**overrides) -> SimConfig:
    """The shipped frozen configuration (true ATE about 0.09); fields overridable."""
    base = dict(
        dgp_bn=frozen_dgp_bn(),
        alpha0=FROZEN_ALPHA0,
        alpha1=FROZEN_ALPHA1,
        beta=FROZEN_BETA,
        n=1000,
        runs=1000,
        master_seed=20240101,
    )
    base.update(overrides)
    return SimConfig(**base)


def indicator_design(covariates: np.ndarray, arities: Sequence[int]) -> np.ndarray:
    """Baseline-indicator coding: one column per level ``2..r_l`` of every covariate."""
    cols = []
    for l, r in enumerate(arities):
        for level in range(2, r + 1):
            cols.append((covariates[:, l] == level).astype(float))
    return np.column_stack(cols) if cols else np.zeros((len(covariates), 0))


def outcome_probabilities(cfg: SimConfig, covariates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``P(Y_(0)=1 | x)`` and ``P(Y_(1)=1 | x)`` from the two logistic models."""
    lin = cfg.alpha0 + indicator_design(covariates, cfg.dgp_bn.dag.arities[1:]) @ np.asarray(cfg.beta)
    return _logistic(lin), _logistic(lin + cfg.alpha1)


def outcome_dgp(cfg: SimConfig) -> DiscreteDgp:
    return DiscreteDgp.from_bn(cfg.dgp_bn, lambda cells: outcome_probabilities(cfg, cells))


def true_delta(cfg: SimConfig) -> float:
    return true_theta(outcome_dgp(cfg))[2]


def run_seed(master_seed: int, run_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(run_index)])


@dataclass(frozen=True)
class GeneratedRun:
    dataset: Dataset
    y0: np.ndarray
    y1: np.ndarray


def generate_full(cfg: SimConfig, run_index: int, n: int | None = None) -> GeneratedRun:
    n = cfg.n if n is None else n
    rng = np.random.default_rng(run_seed(cfg.master_seed, run_index))
    table = sample_with(cfg.dgp_bn, n, rng)
    x = table.codes[:, 1:] + 1
    p0, p1 = outcome_probabilities(cfg, x)
    u = rng.random((n, 2))
    y0 = (u[:, 0] < p0).astype(np.int64)
    y1 = (u[:, 1] < p1).astype(np.int64)
    t = table.codes[:, 0]
    y = np.where(t == 1, y1, y0)
    ds = Dataset(t, y, x, cfg.dgp_bn.nodes[0], VariableMeta.binary("Y"), tuple(cfg.dgp_bn.nodes[1:]))
    return GeneratedRun(ds, y0, y1)


def generate_run(cfg: SimConfig, run_index: int) -> Dataset:
    """Sample ``(T, X)`` from the DGP network, potential outcomes from the logistic models."""
    return generate_full(cfg, run_index).dataset


@dataclass(frozen=True)
class RunResult:
    run: int
    ok: bool
    error: str = ""
    statistic: float = float("nan")
    ci_lo: float = float("nan")
    ci_hi: float = float("nan")
    reject: bool = False
    p_value: float = float("nan")
    sigma2: float = float("nan")
    n_clipped: int = 0


def _propensity(cfg: SimConfig, ps_method: str, ds: Dataset) -> PsVector:
    if ps_method == "true-ps":
        p1 = conditional_rows(cfg.dgp_bn, ds.node_table().codes, 0)[:, 1]
        return PsVector.from_raw(p1, cfg.delta_clip)
    if ps_method == "saturated":
        return estimate_propensity(ds, "saturated", delta_clip=cfg.delta_clip)[0]
    score = "aic" if ps_method == "bn-aic" else "bic"
    return estimate_propensity(ds, "bn", score, cfg.tabu, cfg.smoothing, cfg.delta_clip)[0]


def run_one(cfg: SimConfig, run_index: int, ps_methods: Sequence[str], estimators: Sequence[str]) -> dict:
    """One data draw, analysed by every requested (PS method, estimator) pair."""
    out = {}
    try:
        ds = generate_run(cfg, run_index)
    except BnCausalError as exc:
        return {(m, e): RunResult(run_index, False, type(exc).__name__) for m in ps_methods for e in estimators}
    for method in ps_methods:
        try:
            ps = _propensity(cfg, method, ds)
            score = "aic" if method == "bn-aic" else "bic"
            oc = outcome_probs(ds, cfg.outcome_method, score, cfg.tabu, cfg.smoothing)
            for est in estimators:
                rep = ate_test(ds, ps, cfg.alpha, est, oc)
                out[(method, est)] = RunResult(
                    run_index, True, "", rep.statistic, rep.ci[0], rep.ci[1], rep.reject,
                    rep.p_value, rep.sigma2_hat, rep.n_clipped,
                )
        except BnCausalError as exc:
            for est in estimators:
                out[(method, est)] = RunResult(run_index, False, type(exc).__name__)
    return out


@dataclass
class SimMetrics:
    n: int
    ps_method: str
    estimator: str
    alpha: float
    true_delta: float
    runs: list[RunResult]
    runtime: float = 0.0

    @property
    def ok_runs(self) -> list[RunResult]:
        return [r for r in self.runs if r.ok]

    @property
    def n_failed(self) -> int:
        return len(self.runs) - len(self.ok_runs)

    @property
    def failures(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.runs:
            if not r.ok:
                out[r.error] = out.get(r.error, 0) + 1
        return out

    @property
    def biases(self) -> np.ndarray:
        return np.array([r.statistic - self.true_delta for r in self.ok_runs])

    @property
    def mean_bias(self) -> float:
        b = self.biases
        return math.fsum(b.tolist()) / len(b) if len(b) else float("nan")

    @property
    def median_bias(self) -> float:
        b = self.biases
        return float(np.median(b)) if len(b) else float("nan")

    @property
    def bias_se(self) -> float:
        b = self.biases
        return float(b.std(ddof=1) / math.sqrt(len(b))) if len(b) > 1 else float("nan")

    @property
    def ec(self) -> float:
        ok = self.ok_runs
        if not ok:
            return float("nan")
        return sum(r.ci_lo <= self.true_delta <= r.ci_hi for r in ok) / len(ok)

    @property
    def err(self) -> float:
        ok = self.ok_runs
        if not ok:
            return float("nan")
        return sum(r.ci_lo > 0 or r.ci_hi < 0 for r in ok) / len(ok)

    def summary(self) -> dict:
        return {
            "n": self.n,
            "ps_method": self.ps_method,
            "estimator": self.estimator,
            "true_delta": self.true_delta,
            "runs": len(self.runs),
            "n_ok": len(self.ok_runs),
            "n_failed": self.n_failed,
            "failures": self.failures,
            "EC": self.ec,
            "ERR": self.err,
            "mean_bias": self.mean_bias,
            "median_bias": self.median_bias,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["alpha"] = self.alpha
        d["per_run"] = [asdict(r) for r in self.runs]
        return d


def _run_chunk(args):
    cfg, indices, ps_methods, estimators = args
    return [run_one(cfg, i, ps_methods, estimators) for i in indices]


def run_grid(
    cfg: SimConfig,
    ps_methods: Sequence[str] | None = None,
    estimators: Sequence[str] | None = None,
    threads: int = 1,
) -> list[SimMetrics]:
    """Monte Carlo runs at ``cfg.n``; each draw is reused across methods and estimators.

    Returns one :class:`SimMetrics` per (PS method, estimator), methods outer.
    """
    ps_methods = list(ps_methods or [cfg.ps_method])
    estimators = [e.upper() for e in (estimators or [cfg.estimator])]
    for m in ps_methods:
        if m not in PS_METHODS:
            raise ValueError(f"unknown ps_method {m!r}")
    start = time.perf_counter()
    indices = list(range(cfg.runs))
    if threads > 1 and cfg.runs > 1:
        chunks = [indices[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, c, ps_methods, estimators) for c in chunks]))
        by_run = {}
        for c, res in zip(chunks, parts):
            by_run.update(zip(c, res))
        results = [by_run[i] for i in indices]
    else:
        results = _run_chunk((cfg, indices, ps_methods, estimators))
    elapsed = time.perf_counter() - start
    delta = true_delta(cfg)
    out = []
    for m in ps_methods:
        for e in estimators:
            out.append(SimMetrics(cfg.n, m, e, cfg.alpha, delta, [r[(m, e)] for r in results], elapsed))
    log.info("n=%d runs=%d finished in %.1fs", cfg.n, cfg.runs, elapsed)
    return out


def run_mc(cfg: SimConfig, threads: int = 1) -> SimMetrics:
    """Monte Carlo metrics for the configuration's own PS method and estimator."""
    return run_grid(cfg, threads=threads)[0]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_plot_data(metrics: Iterable[SimMetrics], out_dir) -> dict[str, str]:
    """Write ``bias.csv`` (long format, one row per successful run), ``summary.csv``
    (one row per n, method, estimator) and ``metrics.json``."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("need at least one SimMetrics")
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f) for k, f in
             (("bias", "bias.csv"), ("summary", "summary.csv"), ("metrics", "metrics.json"))}
    with open(paths["bias"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "ps_method", "estimator", "run", "bias"])
        for m in metrics:
            for r in m.ok_runs:
                w.writerow([m.n, m.ps_method, m.estimator, r.run, _fmt(r.statistic - m.true_delta)])
    with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "method", "estimator", "EC", "ERR", "mean_bias", "median_bias", "n_ok", "n_failed"])
        for m in metrics:
            w.writerow([m.n, m.ps_method, m.estimator, _fmt(m.ec), _fmt(m.err),
                        _fmt(m.mean_bias), _fmt(m.median_bias), len(m.ok_runs), m.n_failed])
    with open(paths["metrics"], "w", encoding="utf-8") as fh:
        json.dump([m.to_dict() for m in metrics], fh, indent=2)
        fh.write("\n")
    return paths


def config_from_dict(d: Mapping, **overrides) -> SimConfig:
    """Build a configuration from JSON; ``"dgp": "frozen"`` (default) selects the shipped network."""
    d = dict(d)
    dgp = d.pop("dgp_bn", None) or d.pop("dgp", "frozen")
    d.pop("dgp", None)
    if dgp == "frozen":
        bn = frozen_dgp_bn()
        d.setdefault("alpha0", FROZEN_ALPHA0)
        d.setdefault("alpha1", FROZEN_ALPHA1)
        d.setdefault("beta", FROZEN_BETA)
    else:
        bn = BayesNet.from_dict(dgp)
    tabu = d.pop("tabu", None) or {}
    known = {f for f in SimConfig.__dataclass_fields__} - {"dgp_bn", "tabu"}
    unknown = set(d) - known - {"ps_methods", "estimators", "ns"}
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    kwargs = {k: v for k, v in d.items() if k in known}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    kwargs.setdefault("n", 1000)
    kwargs.setdefault("runs", 1000)
    if kwargs.get("master_seed") is None:
        raise ValueError("a master seed is required")
    return SimConfig(dgp_bn=bn, tabu=TabuConfig(**tabu), **kwargs)
