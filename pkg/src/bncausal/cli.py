"""Command-line entry point: ``bncausal {learn,ate,diagnose,simulate,misspec}``.

Results go to stdout as JSON, human-readable notes to stderr. Exit status is 0 on
success, 1 on usage or configuration errors, 2 on data or contract errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .bn import MODEL_FORMAT, BayesNet, fit_mle
from .data import load_csv, validate
from .errors import BnCausalError
from .estimators import (
    DEFAULT_CLIP,
    PsVector,
    ate_test,
    estimate_propensity,
    imbalance,
    jackknife_variance,
    outcome_probs,
    propensity_scores,
    saturated_propensity,
)
from .misspec import (
    asymptotic_bias,
    empirical_limit_check,
    hajek_bound,
    load_dgp,
    true_theta,
    working_model_from_dict,
    write_limit_table,
)
from .sim import config_from_dict, emit_plot_data, run_grid
from .structure import TabuConfig, parse_arc, tabu_search, to_dot

log = logging.getLogger("bncausal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _csv_list(text, cast=str):
    return [cast(s.strip()) for s in text.split(",") if s.strip()]


def _tabu_flags(p):
    p.add_argument("--score", choices=("aic", "bic"), default="bic")
    p.add_argument("--tabu-len", type=int, default=10)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--seed", type=int, default=0, help="recorded with the search; the search itself is deterministic")
    p.add_argument("--require-arc", action="append", default=[], metavar="A->B")
    p.add_argument("--forbid-arc", action="append", default=[], metavar="A->B")
    p.add_argument("--smoothing", type=float, default=None, help="add-alpha CPT smoothing (off by default)")


def _tabu_config(args, names) -> TabuConfig:
    try:
        return TabuConfig(
            tabu_len=args.tabu_len,
            max_iter=args.max_iter,
            seed=args.seed,
            required=frozenset(parse_arc(a, names) for a in args.require_arc),
            forbidden=frozenset(parse_arc(a, names) for a in args.forbid_arc),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bncausal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=MODEL_FORMAT)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("learn", help="learn a BN structure by tabu search and fit its CPTs")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    _tabu_flags(p)
    p.add_argument("--include-outcome", action="store_true", help="learn over (T, X, Y) instead of (T, X)")
    p.add_argument("--out", help="model JSON path (default: stdout)")
    p.add_argument("--dot", help="DOT rendering path (default: <out>.dot when --out is given)")

    p = sub.add_parser("ate", help="estimate and test the average treatment effect")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ps", choices=("bn", "saturated"), default="bn")
    p.add_argument("--ps-model", help="pre-learned model JSON over (T, X); skips structure learning")
    _tabu_flags(p)
    p.add_argument("--estimator", choices=("h", "ht", "H", "HT"), default="h")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--delta-clip", type=float, default=DEFAULT_CLIP)
    p.add_argument("--outcome-method", choices=("bn", "saturated"), default="bn")
    p.add_argument("--centering", choices=("h", "ht", "H", "HT"), default="h")
    p.add_argument("--jackknife", action="store_true", help="add the delete-one jackknife variance (slow)")

    p = sub.add_parser("diagnose", help="positivity, propensity and balance diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ps", choices=("bn", "saturated"), default="bn")
    p.add_argument("--ps-model")
    _tabu_flags(p)
    p.add_argument("--delta-clip", type=float, default=DEFAULT_CLIP)

    p = sub.add_parser("simulate", help="Monte Carlo coverage / rejection study")
    p.add_argument("--config", required=True, help="SimConfig JSON file")
    p.add_argument("--seed", type=int, required=True, help="master seed (required)")
    p.add_argument("--runs", type=int)
    p.add_argument("--n", help="sample size(s), comma separated")
    p.add_argument("--ps-method", help="comma separated: bn-aic,bn-bic,saturated,true-ps")
    p.add_argument("--estimator", help="comma separated: H,HT")
    p.add_argument("--out-dir", default="sim-out")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("misspec", help="exact asymptotic bias under a misspecified propensity model")
    p.add_argument("--dgp", required=True, help="DGP JSON file")
    p.add_argument("--working-model", required=True, help='JSON: {"ps": [...]} or {"parents": {...}}')
    p.add_argument("--arm", type=int, choices=(0, 1), default=1)
    p.add_argument("--check-n", help="comma separated sample sizes for the Monte Carlo convergence table")
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refit", action="store_true")
    p.add_argument("--out", help="convergence table CSV path")
    return parser


def _ps_from_args(args, ds):
    if args.ps_model:
        with open(args.ps_model, encoding="utf-8") as fh:
            bn = BayesNet.from_json(fh.read())
        return propensity_scores(bn, ds, args.delta_clip), bn
    if args.ps == "saturated":
        return estimate_propensity(ds, "saturated", delta_clip=args.delta_clip)
    cfg = _tabu_config(args, ds.node_table().names)
    return estimate_propensity(ds, "bn", args.score, cfg, args.smoothing, args.delta_clip)


def cmd_learn(args) -> int:
    ds = load_csv(args.data, args.schema)
    table = ds.node_table(include_outcome=args.include_outcome)
    cfg = _tabu_config(args, table.names)
    dag = tabu_search(table, args.score, cfg)
    bn = fit_mle(dag, table, args.smoothing)
    text = bn.to_json()
    dot = to_dot(dag)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    dot_path = args.dot or (args.out + ".dot" if args.out else None)
    if dot_path:
        with open(dot_path, "w", encoding="utf-8") as fh:
            fh.write(dot)
    print(f"learned {len(dag.arcs())} arcs with {args.score.upper()}", file=sys.stderr)
    return 0


def cmd_ate(args) -> int:
    ds = load_csv(args.data, args.schema)
    ps, _ = _ps_from_args(args, ds)
    names = ds.node_table(include_outcome=True).names
    oc = outcome_probs(ds, args.outcome_method, args.score, _tabu_config(args, names), args.smoothing)
    rep = ate_test(ds, ps, args.alpha, args.estimator, oc, args.centering)
    out = rep.to_dict()
    if args.jackknife:
        if args.ps_model or args.ps == "saturated":
            fixed_bn = None if args.ps == "saturated" and not args.ps_model else _ps_from_args(args, ds)[1]

            def refit(sub):
                if fixed_bn is None:
                    return PsVector.from_raw(saturated_propensity(sub), args.delta_clip)
                return propensity_scores(fit_mle(fixed_bn.dag, sub.node_table(), args.smoothing), sub, args.delta_clip)
        else:
            cfg = _tabu_config(args, ds.node_table().names)

            def refit(sub):
                return estimate_propensity(sub, "bn", args.score, cfg, args.smoothing, args.delta_clip)[0]

        jk = jackknife_variance(ds, refit, args.estimator)
        out["jackknife"] = {"variance": jk.variance, "n_times_variance": jk.variance * ds.n, "skipped": jk.n_skipped}
    sys.stdout.write(_dump(out))
    verdict = "reject" if rep.reject else "do not reject"
    print(
        f"D_n={rep.statistic:.4f} CI=[{rep.ci[0]:.4f}, {rep.ci[1]:.4f}] p={rep.p_value:.4g}: {verdict} H0",
        file=sys.stderr,
    )
    return 0


def cmd_diagnose(args) -> int:
    ds = load_csv(args.data, args.schema)
    report = validate(ds)
    ps, _ = _ps_from_args(args, ds)
    balance = []
    for l, meta in enumerate(ds.covariate_meta):
        for level in range(1, meta.arity + 1):
            f = (ds.covariates[:, l] == level).astype(float)
            balance.append({
                "covariate": meta.name,
                "level": meta.labels[level - 1],
                "imbalance_treated": imbalance(ds, ps, f, 1),
                "imbalance_control": imbalance(ds, ps, f, 0),
            })
    weight_sums = {
        f"arm{k}": float(np.sum((ds.treatment == k) / ps.arm(k)) / ds.n) for k in (0, 1)
    }
    out = {
        "n": ds.n,
        "positivity": report.to_dict(),
        "n_clipped": ps.n_clipped,
        "ps_range": [float(ps.raw.min()), float(ps.raw.max())],
        "weight_sums": weight_sums,
        "balance": balance,
    }
    sys.stdout.write(_dump(out))
    print(f"{len(report.violations)} strata violate positivity", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        ns = _csv_list(args.n, int) if args.n else raw.get("ns") or [raw.get("n", 1000)]
        if not isinstance(ns, list):
            ns = [ns]
        methods = _csv_list(args.ps_method) if args.ps_method else raw.get("ps_methods") or [raw.get("ps_method", "bn-bic")]
        ests = _csv_list(args.estimator) if args.estimator else raw.get("estimators") or [raw.get("estimator", "H")]
        base = config_from_dict(raw, master_seed=args.seed, runs=args.runs, n=int(ns[0]))
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    metrics = []
    for n in ns:
        cfg = replace(base, n=int(n))
        metrics.extend(run_grid(cfg, methods, ests, threads=max(1, args.threads)))
    paths = emit_plot_data(metrics, args.out_dir)
    sys.stdout.write(_dump({"files": paths, "summary": [m.summary() for m in metrics]}))
    for m in metrics:
        print(f"n={m.n} {m.ps_method} {m.estimator}: EC={m.ec:.3f} ERR={m.err:.3f} failed={m.n_failed}",
              file=sys.stderr)
    return 0


def cmd_misspec(args) -> int:
    dgp = load_dgp(args.dgp)
    with open(args.working_model, encoding="utf-8") as fh:
        wm = working_model_from_dict(dgp, json.load(fh))
    th0, th1, delta = true_theta(dgp)
    out = {
        "theta0": th0,
        "theta1": th1,
        "delta": delta,
        "arm": args.arm,
        "working_delta": wm.delta(),
        "hajek_bound": hajek_bound(dgp, args.arm),
        "bias": {e: asymptotic_bias(dgp, wm, e, args.arm) for e in ("H", "HT")},
    }
    if args.check_n:
        ns = _csv_list(args.check_n, int)
        tables = {}
        for e in ("H", "HT"):
            rows = empirical_limit_check(dgp, wm, e, ns, args.runs, args.seed, args.arm, args.refit)
            tables[e] = [r.__dict__ for r in rows]
            if args.out:
                root, ext = os.path.splitext(args.out)
                write_limit_table(rows, f"{root}_{e}{ext or '.csv'}")
        out["convergence"] = tables
    sys.stdout.write(_dump(out))
    return 0


COMMANDS = {
    "learn": cmd_learn,
    "ate": cmd_ate,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "misspec": cmd_misspec,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bncausal: error: {exc}", file=sys.stderr)
        return 1
    except (BnCausalError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"bncausal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"bncausal: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
