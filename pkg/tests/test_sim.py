import csv
import json
import math

import numpy as np
import pytest

from bncausal.misspec import true_theta
from bncausal.sim import (
    FROZEN_ALPHA1,
    FROZEN_ARITIES,
    SimConfig,
    config_from_dict,
    emit_plot_data,
    frozen_config,
    frozen_dgp_bn,
    generate_full,
    generate_run,
    indicator_design,
    outcome_dgp,
    run_grid,
    run_mc,
    run_seed,
    true_delta,
)


def _null_cfg(**kw):
    zero_beta = (0.0,) * len(frozen_config().beta)
    return frozen_config(alpha1=0.0, beta=zero_beta, **kw)


def test_frozen_dgp_shape():
    bn = frozen_dgp_bn()
    assert bn.dag.arities == FROZEN_ARITIES
    assert sorted(FROZEN_ARITIES[1:]) == [2, 2, 2, 3, 4, 5]
    assert len(frozen_config().beta) == sum(a - 1 for a in FROZEN_ARITIES[1:])


def test_frozen_true_delta_near_target():
    d = true_delta(frozen_config())
    assert 0.08 <= d <= 0.10
    # independent recomputation: enumerate every covariate cell by brute force
    cfg = frozen_config()
    dgp = outcome_dgp(cfg)
    acc = 0.0
    for cell, p in zip(dgp.cells, dgp.prob):
        lin = cfg.alpha0
        j = 0
        for l, r in enumerate(FROZEN_ARITIES[1:]):
            for level in range(2, r + 1):
                lin += cfg.beta[j] * (cell[l] == level)
                j += 1
        acc += p * (1 / (1 + math.exp(-(lin + FROZEN_ALPHA1))) - 1 / (1 + math.exp(-lin)))
    assert acc == pytest.approx(d, abs=1e-12)


def test_indicator_design():
    x = np.array([[1, 3], [2, 1], [1, 2]])
    m = indicator_design(x, (2, 3))
    assert m.tolist() == [[0, 0, 1], [1, 0, 0], [0, 1, 0]]


def test_null_model_outcome_share():
    cfg = _null_cfg(n=200_000)
    ds = generate_run(cfg, 0)
    p = 1 / (1 + math.exp(-cfg.alpha0))
    assert abs(ds.outcome.mean() - p) < 3 * math.sqrt(p * (1 - p) / ds.n)


def test_generate_run_is_deterministic():
    cfg = frozen_config(n=500)
    a, b = generate_run(cfg, 7), generate_run(cfg, 7)
    for key in ("treatment", "outcome", "covariates"):
        assert getattr(a, key).tobytes() == getattr(b, key).tobytes()
    c = generate_run(cfg, 8)
    assert c.treatment.tobytes() != a.treatment.tobytes()


def test_seed_streams_independent():
    draws = np.array([np.random.default_rng(run_seed(5, i)).random(2000) for i in range(20)])
    corr = np.corrcoef(draws)
    off = corr[~np.eye(20, dtype=bool)]
    assert np.abs(off).max() < 4 / math.sqrt(2000)
    assert run_seed(5, 1).entropy != run_seed(5, 2).entropy
    assert run_seed(5, 1).entropy == run_seed(5, 1).entropy


def test_large_sample_delta_cross_check():
    cfg = frozen_config(n=1_000_000)
    g = generate_full(cfg, 0)
    mc = (g.y1.astype(float) - g.y0).mean()
    assert abs(mc - true_theta(outcome_dgp(cfg))[2]) < 0.002


def test_ec_err_recomputed_from_runs():
    cfg = frozen_config(n=300, runs=20)
    metrics = run_grid(cfg, ["bn-bic", "saturated"], ["H", "HT"])
    assert [(m.ps_method, m.estimator) for m in metrics] == [
        ("bn-bic", "H"), ("bn-bic", "HT"), ("saturated", "H"), ("saturated", "HT")
    ]
    for m in metrics:
        ok = [r for r in m.runs if r.ok]
        assert m.ec == sum(r.ci_lo <= m.true_delta <= r.ci_hi for r in ok) / len(ok)
        assert m.err == sum(not (r.ci_lo <= 0 <= r.ci_hi) for r in ok) / len(ok)
        assert m.err == sum(r.reject for r in ok) / len(ok)
        assert 0 <= m.ec <= 1 and 0 <= m.err <= 1


def test_failures_are_counted_not_retried():
    # tiny n with a rare treatment level forces saturated strata without both arms
    cfg = frozen_config(n=50, runs=30)
    m = run_grid(cfg, ["saturated"], ["H"])[0]
    assert len(m.runs) == 30
    assert m.n_failed + len(m.ok_runs) == 30
    assert sum(m.failures.values()) == m.n_failed


def test_thread_count_does_not_change_results():
    cfg = frozen_config(n=200, runs=6)
    a = run_grid(cfg, ["bn-bic", "true-ps"], ["H"], threads=1)
    b = run_grid(cfg, ["bn-bic", "true-ps"], ["H"], threads=3)
    for x, y in zip(a, b):
        assert x.runs == y.runs


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_emit_plot_data_shapes(tmp_path):
    cfg = frozen_config(n=200, runs=10, ps_method="true-ps")
    one = run_mc(cfg)
    paths = emit_plot_data([one], tmp_path / "a")
    bias = _read(paths["bias"])
    assert bias[0] == ["n", "ps_method", "estimator", "run", "bias"]
    assert len(bias) - 1 == len(one.ok_runs) == 10
    assert len(_read(paths["summary"])) - 1 == 1

    grid = run_grid(cfg, ["bn-aic", "bn-bic"], ["H", "HT"])
    paths = emit_plot_data(grid, tmp_path / "b")
    summ = _read(paths["summary"])
    assert len(summ) - 1 == 4
    assert {(r[1], r[2]) for r in summ[1:]} == {(m, e) for m in ("bn-aic", "bn-bic") for e in ("H", "HT")}
    metrics = json.loads(open(paths["metrics"]).read())
    assert len(metrics) == 4 and len(metrics[0]["per_run"]) == 10

    again = emit_plot_data(grid, tmp_path / "c")
    for key in paths:
        assert open(paths[key], "rb").read() == open(again[key], "rb").read()
    with pytest.raises(ValueError):
        emit_plot_data([], tmp_path / "d")


def test_config_validation():
    with pytest.raises(ValueError):
        frozen_config(runs=0)
    with pytest.raises(ValueError):
        frozen_config(n=10)
    with pytest.raises(ValueError):
        frozen_config(ps_method="logit")
    with pytest.raises(ValueError):
        frozen_config(estimator="aipw")
    with pytest.raises(ValueError):
        frozen_config(beta=(1.0,))
    with pytest.raises(ValueError):
        config_from_dict({"bogus": 1})


def test_config_round_trip():
    cfg = frozen_config(n=700, runs=3, ps_method="bn-aic")
    d = json.loads(json.dumps(cfg.to_dict()))
    back = config_from_dict(d)
    assert back.to_dict() == cfg.to_dict()
    assert config_from_dict({"runs": 5}, n=900, master_seed=1).n == 900
    with pytest.raises(ValueError):
        config_from_dict({"runs": 5})  # the seed is never implicit


@pytest.mark.slow
def test_true_ps_null_level():
    m = run_mc(_null_cfg(n=1000, runs=500, ps_method="true-ps"))
    assert m.n_failed == 0
    assert abs(m.err - 0.05) <= 0.03


@pytest.mark.slow
def test_true_ps_unbiased():
    cfg = frozen_config(n=5000, runs=600, ps_method="true-ps", outcome_method="saturated")
    for m in run_grid(cfg, ["true-ps"], ["H", "HT"]):
        assert abs(m.mean_bias) <= 3 * m.bias_se
