"""Command-line front end.

Subcommands
-----------
estimate   full pipeline on a CSV dataset, JSON + CSV outputs
tune       K selection (cross-validation or direct plug-in), criterion curve
diagnose   matching discrepancy table and eigenvalue scree CSVs
simulate   Monte Carlo harness, one CSV row per configuration

All randomness flows from seeds named in the config file (there are no
entropy defaults), so a rerun of the same config byte-reproduces the JSON
results document.  ``--seed-override`` replaces every configured seed with
values derived from one master seed.  Results go to ``--out`` or to a fresh
timestamped directory; partially written outputs are removed on failure.

Exit codes: 0 success, 2 data/config error, 3 numerical failure.
"""

import argparse
import csv
import datetime as _dt
import json
import os
import shutil
import sys

import numpy as np
import yaml

from . import estimators as est
from .data import DatasetSchema, load_dataset
from .estimator import LatentFactorDR
from .exceptions import DataError, NfcausalError, NumericalError, SchemaError
from .matching import DistanceMetric, SUMMARY_ROWS
from .simulation import (DgpSpec, EstimatorConfig, KRule, MC_REPORT_COLUMNS,
                         report_row, run_monte_carlo)
from .tuning import cross_validate_k, default_k_candidates, dpi_k

__all__ = ["main"]


def _load_config(path):
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise SchemaError(f"config {path} must be a mapping")
    return cfg


def _schema_from_config(data_cfg):
    measurements = data_cfg.get("measurements")
    if measurements is None:
        prefix = data_cfg.get("measurement_prefix")
        count = data_cfg.get("measurement_count")
        if prefix is None or count is None:
            raise SchemaError(
                "data section needs either `measurements` or "
                "`measurement_prefix` + `measurement_count`"
            )
        measurements = [f"{prefix}{t}" for t in range(1, int(count) + 1)]
    return DatasetSchema(
        outcome=data_cfg["outcome"],
        treatment=data_cfg["treatment"],
        measurements=measurements,
        controls=data_cfg.get("controls", ()) or (),
        high_rank=data_cfg.get("high_rank", ()) or (),
        unit_id=data_cfg.get("unit_id"),
        n_levels=data_cfg.get("n_levels"),
    )


def _seeds_from_config(cfg, override):
    seeds = dict(cfg.get("seeds", {}) or {})
    if override is not None:
        children = np.random.SeedSequence(int(override)).spawn(4)
        derived = [int(c.generate_state(1, np.uint64)[0]) for c in children]
        seeds = {"split": derived[0], "tuning": derived[1],
                 "bootstrap": derived[2], "simulate": derived[3]}
    return seeds


def _estimator_from_config(cfg, seeds):
    ecfg = dict(cfg.get("estimator", {}) or {})
    n_neighbors = ecfg.get("n_neighbors")
    if isinstance(n_neighbors, float):
        n_neighbors = int(n_neighbors)
    return LatentFactorDR(
        n_neighbors=n_neighbors,
        backend=ecfg.get("backend", "local_linear"),
        d_lambda=ecfg.get("d_lambda"),
        d_alpha=ecfg.get("d_alpha", 1),
        m_order=ecfg.get("m_order", 2),
        metric=ecfg.get("metric", "pseudo_max"),
        split_scheme=ecfg.get("split_scheme", "contiguous_halves"),
        propensity_backend=ecfg.get("propensity_backend"),
        outcome_link=ecfg.get("outcome_link", "identity"),
        clip=ecfg.get("clip", 0.01),
        add_intercept=ecfg.get("add_intercept", False),
        k_initial=ecfg.get("k_initial"),
        cv_candidates=ecfg.get("cv_candidates"),
        cv_folds=ecfg.get("cv_folds", 5),
        tuning_level=ecfg.get("tuning_level", 0),
        eigen_ratio_threshold=ecfg.get("eigen_ratio_threshold", 5.0),
        random_state=seeds.get("split"),
    )


def _prepare_out_dir(out):
    if out:
        path = out
        created = not os.path.isdir(path)
        os.makedirs(path, exist_ok=True)
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = f"nfcausal-run-{stamp}"
        os.makedirs(path)
        created = True
    return path, created


def _write_json(path, document):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(document, fh, indent=2, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def _write_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _finite_or_none(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _estimate_document(fitter, sample, cfg, seeds):
    doc = {"n_units": sample.n_units, "n_levels": sample.n_levels,
           "k": fitter.k_, "d_lambda": fitter.d_lambda_,
           "backend": fitter.backend}
    if fitter.tuning_ is not None:
        doc["tuning"] = {"method": fitter.tuning_.method,
                         "k_selected": fitter.tuning_.k_selected,
                         "k_initial": fitter.tuning_.k_initial}
    if fitter.highrank_ is not None:
        doc["theta_w"] = [float(v) for v in fitter.highrank_.theta_hat]

    estimands = cfg.get("estimands", {}) or {}
    mean_rows = []
    doc["estimates"] = []
    for j, j_prime in estimands.get("means", []):
        for level in (j, j_prime):
            if not 0 <= level < sample.n_levels:
                raise DataError(
                    f"estimand level {level} outside the declared "
                    f"{{0, ..., {sample.n_levels - 1}}}"
                )
            sample.require_level(level)
        dr = fitter.counterfactual_mean(j, j_prime)
        doc["estimates"].append({
            "j": j, "j_prime": j_prime, "theta": dr.theta, "sigma": dr.sigma,
            "ci_95": list(dr.ci_95),
            "clipped_fraction": dr.diagnostics.get("clipped_fraction", 0.0),
        })
        mean_rows.append(["mean", j, j_prime, repr(dr.theta), repr(dr.sigma),
                          repr(dr.ci_95[0]), repr(dr.ci_95[1])])
    doc["effects"] = []
    for spec in estimands.get("effects", []):
        j_prime = spec["j_prime"]
        baseline = spec.get("baseline", 0)
        for level in (j_prime, baseline):
            if not 0 <= level < sample.n_levels:
                raise DataError(
                    f"estimand level {level} outside the declared "
                    f"{{0, ..., {sample.n_levels - 1}}}"
                )
            sample.require_level(level)
        eff = fitter.treatment_effect(j_prime, baseline=baseline)
        doc["effects"].append({
            "j_prime": j_prime, "baseline": baseline, "theta": eff.theta,
            "sigma": eff.sigma, "ci_95": list(eff.ci_95),
        })
        mean_rows.append(["effect", baseline, j_prime, repr(eff.theta),
                          repr(eff.sigma), repr(eff.ci_95[0]),
                          repr(eff.ci_95[1])])

    cdf_cfg = cfg.get("cdf", {}) or {}
    doc["cdf"] = None
    cdf_rows = []
    if cdf_cfg.get("enabled"):
        tau_grid = cdf_cfg.get("tau_grid")
        if tau_grid is None and cdf_cfg.get("tau_points"):
            tau_grid = est.default_tau_grid(sample.y,
                                            max_points=int(cdf_cfg["tau_points"]))
        process = fitter.counterfactual_cdf(
            cdf_cfg.get("j", 0), cdf_cfg.get("j_prime", 1), tau_grid,
            band=True, n_draws=int(cdf_cfg.get("n_draws", 500)),
            weights_dist=cdf_cfg.get("weights", "rademacher"),
            seed=int(seeds.get("bootstrap", 0)))
        doc["cdf"] = {
            "j": process.j, "j_prime": process.j_prime,
            "tau": [float(v) for v in process.tau_grid],
            "theta": [float(v) for v in process.theta_of_tau],
            "band_lo": [float(v) for v in process.band_95[:, 0]],
            "band_hi": [float(v) for v in process.band_95[:, 1]],
        }
        cdf_rows = [[repr(float(t)), repr(float(th)), repr(float(lo)), repr(float(hi))]
                    for t, th, lo, hi in zip(process.tau_grid,
                                             process.theta_of_tau,
                                             process.band_95[:, 0],
                                             process.band_95[:, 1])]

    sd_cfg = cfg.get("sd_test", {}) or {}
    doc["sd_test"] = None
    if sd_cfg.get("enabled"):
        result = fitter.sd_test(
            sd_cfg.get("j_a", 1), sd_cfg.get("j_b", 0),
            sd_cfg.get("j_prime", 1),
            n_draws=int(sd_cfg.get("n_draws", 500)),
            seed=int(seeds.get("bootstrap", 0)))
        doc["sd_test"] = {"stat": result.statistic,
                          "crit": result.critical_value,
                          "reject": result.reject}

    diag = fitter.matching_diagnostics()
    doc["diagnostics"] = {
        "degenerate_distance_std": diag.degenerate_std,
        "matching": {g: {k: _finite_or_none(v) for k, v in stats.items()}
                     for g, stats in diag.groups.items()},
    }
    return doc, mean_rows, cdf_rows, diag


def cmd_estimate(args):
    cfg = _load_config(args.config)
    seeds = _seeds_from_config(cfg, args.seed_override)
    schema = _schema_from_config(cfg.get("data", {}) or {})
    panel, sample = load_dataset(cfg["data"]["csv"], schema)
    fitter = _estimator_from_config(cfg, seeds)
    out_dir, created = _prepare_out_dir(args.out)
    try:
        fitter.fit_panel(panel, sample)
        doc, mean_rows, cdf_rows, diag = _estimate_document(
            fitter, sample, cfg, seeds)
        _write_json(os.path.join(out_dir, "results.json"), doc)
        _write_csv(os.path.join(out_dir, "estimates.csv"),
                   ["kind", "j_or_baseline", "j_prime", "theta", "sigma",
                    "ci_lo", "ci_hi"], mean_rows)
        _write_matching_table(out_dir, diag)
        if cdf_rows:
            _write_csv(os.path.join(out_dir, "cdf.csv"),
                       ["tau", "theta", "band_lo", "band_hi"], cdf_rows)
        if (cfg.get("output", {}) or {}).get("fits_dump"):
            _write_fit_dump(out_dir, fitter)
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    print(out_dir)
    return 0


def _write_matching_table(out_dir, diag):
    groups = list(diag.groups)
    rows = [[label] + [repr(diag.groups[g][label]) for g in groups]
            for label in SUMMARY_ROWS]
    _write_csv(os.path.join(out_dir, "matching_diagnostics.csv"),
               ["statistic"] + groups, rows)


def _write_fit_dump(out_dir, fitter):
    nuisance = fitter.nuisance_
    rows = []
    for i in range(nuisance.n_units):
        for level in range(nuisance.n_levels):
            rows.append([i, level, repr(float(nuisance.varsigma_hat[i, level])),
                         repr(float(nuisance.p_hat[i, level])),
                         repr(float(nuisance.p_hat_raw[i, level]))])
    _write_csv(os.path.join(out_dir, "fits.csv"),
               ["unit", "level", "varsigma_hat", "p_hat", "p_hat_raw"], rows)


def cmd_tune(args):
    cfg = _load_config(args.config)
    seeds = _seeds_from_config(cfg, args.seed_override)
    schema = _schema_from_config(cfg.get("data", {}) or {})
    panel, sample = load_dataset(cfg["data"]["csv"], schema)
    tcfg = dict(cfg.get("tune", {}) or {})
    method = tcfg.get("method", "cv")
    level = int(tcfg.get("level", 0))
    fitter = _estimator_from_config(cfg, seeds)
    split = fitter._resolve_split(panel) if fitter.backend == "local_linear" else None
    metric = (fitter.metric if isinstance(fitter.metric, DistanceMetric)
              else DistanceMetric(kind=fitter.metric))
    out_dir, created = _prepare_out_dir(args.out)
    try:
        if method == "cv":
            candidates = tcfg.get("candidates") or default_k_candidates(
                sample.n_units, int(tcfg.get("d_alpha", 1)),
                int(tcfg.get("m_order", 2)))
            result = cross_validate_k(
                sample, panel, level, candidates,
                int(tcfg.get("folds", 5)), int(seeds.get("tuning", 0)),
                metric=metric, row_split=split,
                d_lambda=int(tcfg.get("d_lambda", 2)))
        elif method == "dpi":
            result = dpi_k(
                sample, panel, level, int(tcfg["k_initial"]),
                int(tcfg.get("d_alpha", 1)), int(tcfg.get("m_order", 2)),
                metric=metric, row_split=split,
                proxy=tcfg.get("proxy", "polynomial"))
        else:
            raise DataError(f"unknown tuning method {method!r}")
        _write_json(os.path.join(out_dir, "tuning.json"), {
            "method": result.method, "k_selected": result.k_selected,
            "k_initial": result.k_initial,
        })
        _write_csv(os.path.join(out_dir, "criterion_curve.csv"),
                   ["k", "criterion"],
                   [[k, repr(float(v))] for k, v in result.criterion_curve])
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    print(out_dir)
    return 0


def cmd_diagnose(args):
    cfg = _load_config(args.config)
    seeds = _seeds_from_config(cfg, args.seed_override)
    schema = _schema_from_config(cfg.get("data", {}) or {})
    panel, sample = load_dataset(cfg["data"]["csv"], schema)
    fitter = _estimator_from_config(cfg, seeds)
    dcfg = dict(cfg.get("diagnose", {}) or {})
    out_dir, created = _prepare_out_dir(args.out)
    try:
        fitter.fit_panel(panel, sample)
        _write_matching_table(out_dir, fitter.matching_diagnostics())
        if fitter.backend == "local_linear":
            q = int(dcfg.get("scree_q", 10))
            for unit in dcfg.get("scree_units", []) or []:
                diag = fitter.eigen_diagnostics(int(unit), q=q)
                _write_csv(
                    os.path.join(out_dir, f"scree_unit_{int(unit)}.csv"),
                    ["rank", "eigenvalue"],
                    [[r + 1, repr(float(v))]
                     for r, v in enumerate(diag.leading_eigenvalues)])
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    print(out_dir)
    return 0


def _mc_config_from_entry(entry):
    kcfg = dict(entry.get("k_rule", {}) or {})
    backend = entry.get("backend", "local_linear")
    default_exp = 0.8 if backend == "local_linear" else 2.0 / 3.0
    k_rule = KRule(kind=kcfg.get("kind", "fixed"),
                   c=float(kcfg.get("c", 1.0)),
                   exponent=float(kcfg.get("exponent", default_exp)))
    d_lambda = entry.get("d_lambda", 2 if backend == "local_linear" else None)
    return EstimatorConfig(
        backend=backend, k_rule=k_rule, d_lambda=d_lambda,
        split_scheme=entry.get("split_scheme",
                               "contiguous_halves" if backend == "local_linear"
                               else "none"),
        metric=entry.get("metric", "pseudo_max"),
        propensity_backend=entry.get("propensity_backend"),
        d_alpha=int(entry.get("d_alpha", 1)),
        m_order=int(entry.get("m_order", 2)),
        clip=float(entry.get("clip", 0.01)),
        j=int(entry.get("j", 0)), j_prime=int(entry.get("j_prime", 1)),
    )


def cmd_simulate(args):
    cfg = _load_config(args.config)
    seeds = _seeds_from_config(cfg, args.seed_override)
    entries = cfg.get("simulate")
    if not entries:
        raise SchemaError("config has no `simulate` section")
    out_dir, created = _prepare_out_dir(args.out)
    rows = []
    try:
        for k, entry in enumerate(entries):
            spec = DgpSpec(entry.get("model", "model1"),
                           int(entry["n"]), int(entry["t"]), seed=0)
            config = _mc_config_from_entry(entry)
            seed = entry.get("seed", seeds.get("simulate"))
            if seed is None:
                raise DataError(
                    f"simulate entry {k} has no seed and no override was given"
                )
            report = run_monte_carlo(
                spec, config, int(entry["reps"]), int(seed),
                n_jobs=args.threads)
            rows.append(report_row(report))
        _write_csv(os.path.join(out_dir, "simulation.csv"),
                   list(MC_REPORT_COLUMNS), rows)
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        raise
    print(out_dir)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nfcausal",
        description="Treatment effects with latent confounders measured "
                    "through a noisy factor panel.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("estimate", cmd_estimate), ("tune", cmd_tune),
                     ("diagnose", cmd_diagnose), ("simulate", cmd_simulate)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", default=None,
                       help="output directory (default: fresh timestamped)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker count (default: NFCAUSAL_THREADS or cores)")
        p.add_argument("--seed-override", type=int, default=None,
                       dest="seed_override",
                       help="replace every configured seed from one master")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        os.environ["NFCAUSAL_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, NfcausalError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
