"""Command-line interface: fit, simulate, evaluate, compare-cov, template."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as bio
from .inference import summarize_chain
from .mcmc import ChainConfig, run_chain
from .model import CovStructure, Hyperparameters
from .simulate import (SimDesign, default_sites, design_labels, estimation_metrics,
                       k_histogram, run_replicates, TRUE_BETAS)

COV_CHOICES = ("acac", "unity", "exponential", "gaussian")


def _chain_config(args, config: dict) -> ChainConfig:
    def pick(name, default):
        val = getattr(args, name, None)
        if val is not None:
            return val
        return config.get(name, default)

    return ChainConfig(
        n_iter=int(pick("iters", 25_000)),
        thin=int(pick("thin", 2)),
        burn_in=int(pick("burnin", 9_500)),
        seed=int(pick("seed", 0)),
        k_max=int(pick("k_max", 20)),
    )


def _run_config_dict(args, cfg: ChainConfig, extra: dict | None = None) -> dict:
    doc = {"command": args.command, "n_iter": cfg.n_iter, "thin": cfg.thin,
           "burn_in": cfg.burn_in, "seed": cfg.seed, "k_max": cfg.k_max}
    if extra:
        doc.update(extra)
    return doc


def _trace_rows(out) -> list[dict]:
    rows = []
    for t, s in enumerate(out.states):
        row = {"draw": t, "k": s.partition.k_active, "tau_y": repr(s.tau_y),
               "sigma2": repr(s.sigma2), "lambda": repr(s.lam)}
        for j, a in enumerate(s.alphas):
            row[f"alpha{j}"] = repr(float(a))
        for j, k in enumerate(s.kappas):
            row[f"kappa{j+1}"] = repr(float(k))
        rows.append(row)
    return rows


def cmd_fit(args) -> int:
    config = bio.load_config(args.config)
    data = bio.load_dataset(args.data, intercept=args.intercept)
    cfg = _chain_config(args, config)
    cov = CovStructure(args.cov, data)
    hyper = Hyperparameters()
    out = run_chain(data, hyper, cfg, cov=cov)
    report = summarize_chain(out)
    cfg_hash = bio.config_hash(_run_config_dict(args, cfg, {"cov": args.cov,
                                                            "data": os.path.basename(args.data)}))
    bio.emit_fit(report, args.out, cfg.seed, cfg_hash,
                 [loc.id for loc in data.locs], _trace_rows(out))
    print(f"fit complete: k_hat modes {report.k_posterior}, LPML {report.lpml:.3f}")
    print(f"results written to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    config = bio.load_config(args.config)
    cfg = _chain_config(args, config)
    locs = default_sites()
    design = SimDesign(labels_true=design_labels(args.design, locs), model=args.model)
    hyper = Hyperparameters()
    results = run_replicates(design, locs, hyper, cfg, args.reps,
                             master_seed=cfg.seed, n_jobs=args.jobs)
    ok = [r for r in results if not r.failed]
    aggregates: dict = {"n_reps": args.reps, "n_failed": len(results) - len(ok),
                        "k_histogram": k_histogram(results)}
    if ok:
        aggregates["mean_rand_index"] = float(np.mean([r.ri for r in ok]))
    if len(ok) >= 2:
        beta_true_site = design.betas_true[design.labels_true]
        metrics = estimation_metrics(np.array([r.beta_hat for r in ok]), beta_true_site)
        aggregates.update({k: [float(v) for v in vals] for k, vals in metrics.items()})
    cfg_hash = bio.config_hash(_run_config_dict(
        args, cfg, {"design": args.design, "model": args.model, "reps": args.reps}))
    bio.emit_metrics(results, aggregates, args.out, cfg.seed, cfg_hash)
    print(json.dumps(aggregates, sort_keys=True, default=float))
    return 0


def compare_covariance_structures(data, hyper, cfg: ChainConfig,
                                  structures=COV_CHOICES) -> list[dict]:
    """Fit once per candidate covariance structure and report LPML for each."""
    rows = []
    for kind in structures:
        entry: dict = {"structure": kind}
        try:
            out = run_chain(data, hyper, cfg, cov=CovStructure(kind, data))
            report = summarize_chain(out)
            entry["lpml"] = report.lpml
        except Exception as exc:
            entry["lpml"] = float("-inf")
            entry["error"] = str(exc)
        rows.append(entry)
    best = max(rows, key=lambda r: r["lpml"])
    for r in rows:
        r["best"] = r is best
    return rows


def cmd_compare_cov(args) -> int:
    config = bio.load_config(args.config)
    data = bio.load_dataset(args.data, intercept=args.intercept)
    cfg = _chain_config(args, config)
    hyper = Hyperparameters()
    rows = compare_covariance_structures(data, hyper, cfg)
    os.makedirs(args.out, exist_ok=True)
    cfg_hash = bio.config_hash(_run_config_dict(args, cfg, {"data": os.path.basename(args.data)}))
    doc = {"schema_version": bio.SCHEMA_VERSION, "seed": cfg.seed,
           "config_hash": cfg_hash, "comparison": rows}
    with open(os.path.join(args.out, "compare.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, default=float)
        fh.write("\n")
    for r in rows:
        flag = " <-- best" if r["best"] else ""
        print(f"{r['structure']:>12s}  LPML {r['lpml']:.3f}{flag}")
    return 0


def cmd_evaluate(args) -> int:
    from .simulate import rand_index

    def read_labels(path):
        import csv
        with open(path) as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        header = rows[0]
        id_i, cl_i = header.index("id"), header.index("cluster")
        return {r[id_i]: int(r[cl_i]) for r in rows[1:]}

    got = read_labels(args.labels)
    truth = read_labels(args.truth)
    ids = sorted(got)
    if sorted(truth) != ids:
        raise SystemExit("label files cover different site ids")
    ri = rand_index(np.array([truth[i] for i in ids]), np.array([got[i] for i in ids]))
    print(f"rand_index: {ri:.6f}")
    return 0


def cmd_template(args) -> int:
    bio.write_georgia_template(args.out)
    print(f"template written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bccr",
        description="Bayesian clustered coefficients regression with "
                    "auxiliary-covariates-assisted spatial random effects")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_chain_flags(p):
        p.add_argument("--config", default=None, help="YAML config file; flags override")
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--thin", type=int, default=None)
        p.add_argument("--burnin", type=int, default=None,
                       help="burn-in counted in retained (post-thinning) samples")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--k-max", dest="k_max", type=int, default=None)

    p_fit = sub.add_parser("fit", help="fit the model to a dataset CSV")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--cov", choices=COV_CHOICES, default="acac")
    p_fit.add_argument("--intercept", action="store_true")
    p_fit.add_argument("--out", required=True)
    add_chain_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="run the simulation harness")
    p_sim.add_argument("--design", type=int, choices=(1, 2), required=True)
    p_sim.add_argument("--model", type=int, choices=(1, 2, 3), required=True)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--out", required=True)
    add_chain_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_cmp = sub.add_parser("compare-cov",
                           help="fit every covariance structure and rank by LPML")
    p_cmp.add_argument("--data", required=True)
    p_cmp.add_argument("--intercept", action="store_true")
    p_cmp.add_argument("--out", required=True)
    add_chain_flags(p_cmp)
    p_cmp.set_defaults(func=cmd_compare_cov)

    p_eval = sub.add_parser("evaluate", help="Rand index between two labels.csv files")
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_tpl = sub.add_parser("make-georgia-template",
                           help="emit the expected CSV header for the housing dataset")
    p_tpl.add_argument("--out", required=True)
    p_tpl.set_defaults(func=cmd_template)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
