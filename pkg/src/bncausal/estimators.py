"""Propensity scores from a fitted network and inverse-probability-weighted ATE inference.

Reductions over rows use :func:`math.fsum`, which is correctly rounded, so every
output is invariant to the row order of the input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Callable

import numpy as np

from .bn import BayesNet, conditional_rows, fit_mle
from .data import Dataset
from .errors import ArityMismatch, EmptyArm
from .structure import TabuConfig, tabu_search

ESTIMATORS = ("H", "HT")
DEFAULT_CLIP = 0.01


def _fsum(a) -> float:
    return math.fsum(np.asarray(a, dtype=float).tolist())


@dataclass(frozen=True)
class PsVector:
    """Per-row ``P(T=1 | X=x_i)`` after clipping to ``[delta_clip, 1 - delta_clip]``."""

    p1: np.ndarray
    clipped: np.ndarray
    raw: np.ndarray
    delta_clip: float = DEFAULT_CLIP

    @classmethod
    def from_raw(cls, p1, delta_clip: float = DEFAULT_CLIP) -> "PsVector":
        if not 0 <= delta_clip < 0.5:
            raise ValueError("delta_clip must lie in [0, 0.5)")
        raw = np.asarray(p1, dtype=float).copy()
        if np.isnan(raw).any():
            raise ValueError("propensity scores contain NaN")
        p = np.clip(raw, delta_clip, 1 - delta_clip)
        clipped = p != raw
        for a in (raw, p, clipped):
            a.setflags(write=False)
        return cls(p, clipped, raw, delta_clip)

    @property
    def p0(self) -> np.ndarray:
        return 1.0 - self.p1

    def arm(self, k: int) -> np.ndarray:
        return self.p1 if k == 1 else self.p0

    @property
    def n_clipped(self) -> int:
        return int(self.clipped.sum())


def propensity_scores(bn: BayesNet, ds: Dataset, delta_clip: float = DEFAULT_CLIP, treatment_node: int = 0) -> PsVector:
    """Ratio of joint MLEs ``p(1, x) / (p(0, x) + p(1, x))`` for each row."""
    table = ds.node_table()
    if tuple(int(a) for a in table.arities) != bn.dag.arities:
        raise ArityMismatch(f"model arities {bn.dag.arities} do not match data {tuple(table.arities)}")
    p1 = conditional_rows(bn, table.codes, treatment_node)[:, 1]
    return PsVector.from_raw(p1, delta_clip)


def saturated_propensity(ds: Dataset) -> np.ndarray:
    """Empirical treated share within each exact covariate stratum (unclipped)."""
    _, inverse = ds.strata()
    treated = np.bincount(inverse, weights=ds.treatment)
    total = np.bincount(inverse)
    return treated[inverse] / total[inverse]


def estimate_propensity(
    ds: Dataset,
    method: str = "bn",
    score: str = "bic",
    tabu: TabuConfig | None = None,
    smoothing: float | None = None,
    delta_clip: float = DEFAULT_CLIP,
) -> tuple[PsVector, BayesNet | None]:
    """Learn a network over ``(T, X)`` and derive propensity scores, or use the saturated model."""
    if method == "saturated":
        return PsVector.from_raw(saturated_propensity(ds), delta_clip), None
    if method != "bn":
        raise ValueError(f"unknown propensity method {method!r}")
    table = ds.node_table()
    dag = tabu_search(table, score, tabu)
    bn = fit_mle(dag, table, smoothing)
    return propensity_scores(bn, ds, delta_clip), bn


def _arm_mask(ds: Dataset, k: int) -> np.ndarray:
    mask = ds.treatment == k
    if not mask.any():
        raise EmptyArm(k)
    return mask


def theta_hajek(ds: Dataset, ps: PsVector) -> tuple[float, float]:
    """Weighted share of ``Y=1`` in each arm, weights ``1/p_k(x_i)`` normalised to sum one."""
    out = []
    for k in (0, 1):
        mask = _arm_mask(ds, k)
        w = 1.0 / ps.arm(k)[mask]
        out.append(_fsum(w * ds.outcome[mask]) / _fsum(w))
    return out[0], out[1]


def theta_ht(ds: Dataset, ps: PsVector) -> tuple[float, float]:
    """``(1/n) sum I(Y=1) I(T=k) / p_k(x_i)``; unbounded above, never truncated."""
    out = []
    for k in (0, 1):
        mask = _arm_mask(ds, k)
        w = 1.0 / ps.arm(k)[mask]
        out.append(_fsum(w * ds.outcome[mask]) / ds.n)
    return out[0], out[1]


@dataclass(frozen=True)
class OutcomeProbs:
    """Per-row estimates of ``P(Y=1 | T=k, X=x_i)`` for ``k = 0, 1``."""

    theta0: np.ndarray
    theta1: np.ndarray
    method: str
    n_fallback: int = 0

    def arm(self, k: int) -> np.ndarray:
        return self.theta1 if k == 1 else self.theta0


def outcome_probs(
    ds: Dataset,
    method: str = "bn",
    score: str = "bic",
    tabu: TabuConfig | None = None,
    smoothing: float | None = None,
) -> OutcomeProbs:
    """Outcome regressions ``theta_k(x)`` used by the variance plug-in.

    ``bn`` learns a network over ``(T, X, Y)`` and queries ``P(Y=1 | T=k, X=x_i)``;
    ``saturated`` uses the share of ``Y=1`` in the ``(T=k, x)`` cell. Queries with
    no data support fall back to the share of ``Y=1`` in arm ``k``, and are counted.
    """
    arm_share = [float(ds.outcome[ds.treatment == k].mean()) for k in (0, 1)]
    thetas = []
    fallback = 0
    if method == "saturated":
        _, inverse = ds.strata()
        s = inverse.max() + 1
        for k in (0, 1):
            mask = ds.treatment == k
            num = np.bincount(inverse[mask], weights=ds.outcome[mask], minlength=s)
            den = np.bincount(inverse[mask], minlength=s)
            cell = den[inverse] > 0
            th = np.full(ds.n, arm_share[k])
            th[cell] = num[inverse[cell]] / den[inverse[cell]]
            fallback += int((~cell).sum())
            thetas.append(th)
    elif method == "bn":
        table = ds.node_table(include_outcome=True)
        dag = tabu_search(table, score, tabu)
        bn = fit_mle(dag, table, smoothing)
        y_node = table.codes.shape[1] - 1
        for k in (0, 1):
            codes = table.codes.copy()
            codes[:, 0] = k
            th = conditional_rows(bn, codes, y_node, strict=False)[:, 1]
            bad = np.isnan(th)
            th[bad] = arm_share[k]
            fallback += int(bad.sum())
            thetas.append(th)
    else:
        raise ValueError(f"unknown outcome method {method!r}")
    for th in thetas:
        th.setflags(write=False)
    return OutcomeProbs(thetas[0], thetas[1], method, fallback)


def influence_terms(ds: Dataset, ps: PsVector, outcome: OutcomeProbs, center: tuple[float, float]) -> np.ndarray:
    """Per-row ``d_i = h_i1 - h_i0`` of the plug-in variance."""
    t = ds.treatment.astype(float)
    y = ds.outcome.astype(float)
    p = ps.p1
    q = ps.p0
    h1 = (t / p * y - center[1]) - outcome.theta1 / p * (t - p)
    h0 = ((1 - t) / q * y - center[0]) - outcome.theta0 / q * ((1 - t) - q)
    return h1 - h0


def sigma2_hat(ds: Dataset, ps: PsVector, outcome: OutcomeProbs, center: tuple[float, float]) -> float:
    """``(1/n) sum d_i^2`` with ``h_ik`` centred at ``center = (theta_0, theta_1)``."""
    d = influence_terms(ds, ps, outcome, center)
    return _fsum(d * d) / ds.n


@dataclass(frozen=True)
class AteReport:
    estimator: str
    theta_h: tuple[float, float]
    theta_ht: tuple[float, float]
    delta_h: float
    delta_ht: float
    statistic: float
    sigma2_hat: float
    ci: tuple[float, float]
    p_value: float
    reject: bool
    alpha: float
    n: int
    centering: str
    delta_clip: float
    n_clipped: int
    outcome_method: str
    n_outcome_fallback: int
    ps_summary: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("theta_h", "theta_ht", "ci"):
            d[key] = list(d[key])
        return d


def _ps_summary(ds: Dataset, ps: PsVector) -> dict:
    out = {}
    for k in (0, 1):
        v = ps.p1[ds.treatment == k]
        out[f"arm{k}"] = {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max())}
    return out


def normal_test(statistic: float, sigma2: float, n: int, alpha: float) -> tuple[tuple[float, float], float, bool]:
    """CI ``D ± z_{alpha/2} sigma/sqrt(n)``, two-sided normal p-value and the CI-based decision."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = NormalDist().inv_cdf(1 - alpha / 2)
    se = math.sqrt(max(sigma2, 0.0) / n)
    ci = (statistic - z * se, statistic + z * se)
    reject = ci[0] > 0 or ci[1] < 0
    if se == 0:
        p = 1.0 if statistic == 0 else 0.0
    else:
        p = math.erfc(abs(statistic) / se / math.sqrt(2))
    return ci, p, reject


def ate_test(
    ds: Dataset,
    ps: PsVector,
    alpha: float = 0.05,
    estimator: str = "H",
    outcome: OutcomeProbs | None = None,
    centering: str = "H",
) -> AteReport:
    """Estimate both ``theta`` pairs, the plug-in variance, the CI and the test of ``Delta = 0``.

    The test statistic is the chosen estimator's ``theta_1 - theta_0``. ``outcome``
    defaults to BN-based outcome regressions learned with BIC.
    """
    estimator = estimator.upper()
    centering = centering.upper()
    if estimator not in ESTIMATORS or centering not in ESTIMATORS:
        raise ValueError(f"estimator and centering must be one of {ESTIMATORS}")
    th_h = theta_hajek(ds, ps)
    th_ht = theta_ht(ds, ps)
    if outcome is None:
        outcome = outcome_probs(ds, "bn")
    center = th_h if centering == "H" else th_ht
    s2 = sigma2_hat(ds, ps, outcome, center)
    d_h = th_h[1] - th_h[0]
    d_ht = th_ht[1] - th_ht[0]
    stat = d_h if estimator == "H" else d_ht
    ci, p, reject = normal_test(stat, s2, ds.n, alpha)
    return AteReport(
        estimator=estimator,
        theta_h=th_h,
        theta_ht=th_ht,
        delta_h=d_h,
        delta_ht=d_ht,
        statistic=stat,
        sigma2_hat=s2,
        ci=ci,
        p_value=p,
        reject=reject,
        alpha=alpha,
        n=ds.n,
        centering=centering,
        delta_clip=ps.delta_clip,
        n_clipped=ps.n_clipped,
        outcome_method=outcome.method,
        n_outcome_fallback=outcome.n_fallback,
        ps_summary=_ps_summary(ds, ps),
    )


@dataclass(frozen=True)
class JackknifeResult:
    variance: float
    replicates: np.ndarray
    n_skipped: int
    slow_path: bool = True


def jackknife_variance(
    ds: Dataset,
    fit_ps: Callable[[Dataset], PsVector],
    estimator: str = "H",
) -> JackknifeResult:
    """Delete-one jackknife of ``D_n``: ``((m-1)/m) sum (D_(-i) - mean)^2``.

    ``fit_ps`` re-estimates propensity scores on each leave-one-out sample. A
    replicate whose sample loses a whole arm is skipped and counted; ``m`` is the
    number of replicates kept. This refits ``n`` times and is slow for large ``n``.
    """
    if ds.n < 3:
        raise ValueError("jackknife needs n >= 3")
    est = theta_hajek if estimator.upper() == "H" else theta_ht
    reps = []
    skipped = 0
    idx = np.arange(ds.n)
    for i in range(ds.n):
        try:
            sub = ds.subset(idx != i)
            th = est(sub, fit_ps(sub))
        except EmptyArm:
            skipped += 1
            continue
        reps.append(th[1] - th[0])
    reps = np.asarray(reps)
    m = len(reps)
    if m < 2:
        return JackknifeResult(float("nan"), reps, skipped)
    mean = _fsum(reps) / m
    dev = reps - mean
    return JackknifeResult((m - 1) / m * _fsum(dev * dev), reps, skipped)


def imbalance(ds: Dataset, ps: PsVector, f, k: int = 1) -> float:
    """``|(1/n) sum I(T_i=k) f(x_i) / p_k(x_i) - (1/n) sum f(x_i)|``.

    ``f`` is either a callable on the ``(n, L)`` covariate code matrix or a
    precomputed length-``n`` array.
    """
    vals = np.asarray(f(ds.covariates) if callable(f) else f, dtype=float)
    if vals.shape != (ds.n,) or not np.isfinite(vals).all():
        raise ValueError("f must give a finite value per row")
    mask = ds.treatment == k
    weighted = _fsum(vals[mask] / ps.arm(k)[mask])
    return abs(weighted / ds.n - _fsum(vals) / ds.n)
