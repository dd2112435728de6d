"""Average treatment effect estimation and testing for binary outcomes, with
propensity scores from maximum-likelihood discrete Bayesian networks."""

from .bn import MODEL_FORMAT, BayesNet, Dag, conditional_prob, fit_mle, joint_prob, log_likelihood, sample
from .data import Dataset, NodeTable, VariableMeta, load_csv, validate
from .estimators import (
    AteReport,
    PsVector,
    ate_test,
    estimate_propensity,
    imbalance,
    jackknife_variance,
    outcome_probs,
    propensity_scores,
    sigma2_hat,
    theta_hajek,
    theta_ht,
)
from .structure import TabuConfig, is_acyclic, score, tabu_search

__version__ = "0.1.0"
