"""Batch command-line interface.

Subcommands: derive (per-subject connectivity), estimate (IPW effects and
simultaneous inference), simulate (synthetic study dataset on disk), and
experiment (the Monte Carlo study).  Every run writes an echo of the fully
resolved configuration next to its outputs; re-running from the echo
reproduces the outputs bit-identically.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .connectivity import SplitConfig, derive_connectivity, ordered_pairs
from .effects import DEFAULT_VARIANCE_FLOOR, OutcomePanel, estimate_effects
from .errors import ConfigInvalid, GcipwError, ParseError
from .experiment import (
    ALL_METHODS,
    DESK_GRID,
    DESK_REPLICATIONS,
    METHODS_BY_NAME,
    PAPER_GRID,
    PAPER_REPLICATIONS,
    DgpConfig,
    PipelineConfig,
    build_dgp,
    run_cell,
)
from .inference import BootstrapConfig, stepdown_augment
from .io import (
    load_dataset,
    pair_label,
    parse_pair_label,
    read_covariates_csv,
    read_table,
    write_config_echo,
    write_covariates_csv,
    write_panel_csv,
    write_table,
)
from .propensity import LINKS, CovariateTable, fit_propensity
from .var import TimeSeriesPanel, simulate_var

THREADS_ENV = "GCIPW_THREADS"


def _default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            pass
    return 1


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    loaded = yaml.safe_load(path.read_text())
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigInvalid(f"{path}: config must be a mapping")
    return loaded


def _split_config(tree: dict) -> SplitConfig:
    tree = tree or {}
    return SplitConfig(
        split_fraction=float(tree.get("split_fraction", 0.5)),
        max_order=int(tree.get("max_order", 3)),
        max_conditioning=tree.get("max_conditioning"),
        selection_criterion=str(tree.get("selection_criterion", "bic")),
        screening_rule=str(tree.get("screening_rule", "cross_correlation")),
    )


def _bootstrap_config(tree: dict, seed: int) -> BootstrapConfig:
    tree = tree or {}
    return BootstrapConfig(
        replications=int(tree.get("replications", 2000)),
        alpha=float(tree.get("alpha", 0.05)),
        fdp_threshold=float(tree.get("fdp_threshold", 0.1)),
        seed=seed,
        fresh_multipliers_per_step=bool(tree.get("fresh_multipliers_per_step", True)),
    )


def _dgp_config(tree: dict, seed: int) -> DgpConfig:
    tree = dict(tree or {})
    fields = {f.name for f in dataclasses.fields(DgpConfig)}
    unknown = set(tree) - fields
    if unknown:
        raise ConfigInvalid(f"unknown dgp keys: {sorted(unknown)}")
    tree.setdefault("master_seed", seed)
    if "beta_true" in tree:
        tree["beta_true"] = tuple(float(b) for b in tree["beta_true"])
    for key in ("diag_range", "offdiag_range", "covariate_mean"):
        if key in tree:
            tree[key] = tuple(float(v) for v in tree[key])
    return DgpConfig(**tree)


def _echo(out_dir: Path, resolved: dict):
    write_config_echo(out_dir / "config_echo.yaml", resolved)


def _resolved_common(args, command, extra):
    resolved = {
        "command": command,
        "seed": int(args.seed),
        "out": str(args.out),
        "threads": int(args.threads),
    }
    resolved.update(extra)
    return resolved


# ---------------------------------------------------------------- derive

def cmd_derive(args) -> int:
    cfg = _load_config(args.config)
    if args.dataset:
        cfg["dataset"] = args.dataset
    if "dataset" not in cfg:
        raise ConfigInvalid("derive needs a dataset manifest (config key 'dataset')")
    split = _split_config(cfg.get("split"))
    use_splitting = bool(cfg.get("use_splitting", True))
    out_dir = Path(args.out)
    panels, table = load_dataset(cfg["dataset"])
    p = panels[0].n_units
    pair_list = ordered_pairs(p)
    outcomes = []
    report_rows = []
    for sid, panel in zip(table.subject_ids, panels):
        outcome = derive_connectivity(panel, split, subject_id=sid,
                                      use_splitting=use_splitting)
        outcomes.append(outcome)
        rows = [
            [j1, j2, fs.value, fs.df1, fs.df2, fs.p_value]
            for (j1, j2), fs in sorted(outcome.entries.items())
        ]
        write_table(
            out_dir / f"connectivity_{sid}.csv",
            ["j1", "j2", "f_value", "df1", "df2", "p_value"],
            rows,
            metadata={"subject_id": sid, "order": outcome.model.order,
                      "seed": args.seed},
        )
        report_rows.extend(outcome.failures)
    dropped = {(j1, j2) for _, j1, j2, _ in report_rows}
    kept = [pair for pair in pair_list if pair not in dropped]
    header = ["subject_id"] + [pair_label(*pair) for pair in kept]
    panel_rows = [
        [o.subject_id] + [o.entries[pair].value for pair in kept]
        for o in outcomes
    ]
    write_table(out_dir / "outcome_panel.csv", header, panel_rows,
                metadata={"seed": args.seed, "use_splitting": use_splitting,
                          "dropped_pairs": [pair_label(*d) for d in sorted(dropped)]})
    write_table(out_dir / "derivation_report.csv",
                ["subject_id", "j1", "j2", "error"], report_rows,
                metadata={"seed": args.seed})
    _echo(out_dir, _resolved_common(args, "derive", {
        "dataset": str(cfg["dataset"]),
        "use_splitting": use_splitting,
        "split": dataclasses.asdict(split),
    }))
    return 0


# --------------------------------------------------------------- estimate

def _read_outcome_panel(path) -> OutcomePanel:
    header, rows = read_table(path)
    pairs = tuple(parse_pair_label(h) for h in header[1:])
    ids = tuple(row[0] for row in rows)
    values = np.array([[float(v) for v in row[1:]] for row in rows])
    return OutcomePanel(values, pairs, ids)


def cmd_estimate(args) -> int:
    cfg = _load_config(args.config)
    for key in ("outcomes", "covariates"):
        if getattr(args, key, None):
            cfg[key] = getattr(args, key)
        if key not in cfg:
            raise ConfigInvalid(f"estimate needs config key {key!r}")
    link_kind = str(cfg.get("link", "logistic"))
    if link_kind not in LINKS:
        raise ConfigInvalid(f"unknown link {link_kind!r}")
    link = LINKS[link_kind]
    floor = float(cfg.get("variance_floor", DEFAULT_VARIANCE_FLOOR))
    boot = _bootstrap_config(cfg.get("bootstrap"), int(args.seed))
    out_dir = Path(args.out)

    outcomes = _read_outcome_panel(cfg["outcomes"])
    table = read_covariates_csv(cfg["covariates"],
                                cfg.get("treatment_column", "treatment"))
    if table.subject_ids != outcomes.subject_ids:
        raise ConfigInvalid("subject order differs between outcomes and covariates")
    fit = fit_propensity(table, link)
    se = np.sqrt(np.diag(np.linalg.inv(fit.fisher_info)) / table.n)
    effects = estimate_effects(outcomes, table, fit, link, variance_floor=floor)
    result = stepdown_augment(
        effects.tau_star, effects.influence, effects.variance, effects.active,
        boot, pair_labels=outcomes.pair_labels,
    )
    rejected_order = {pair: k for k, pair in enumerate(result.rejections)}
    summary = {
        "link": link_kind,
        "beta": [float(b) for b in fit.beta],
        "beta_se": [float(s) for s in se],
        "iterations": fit.iterations,
        "converged": bool(fit.converged),
        "fitted_min": float(fit.fitted.min()),
        "fitted_max": float(fit.fitted.max()),
        "n": table.n,
        "n_treated": int(table.treatment.sum()),
    }
    (out_dir).mkdir(parents=True, exist_ok=True)
    (out_dir / "propensity_summary.yaml").write_text(
        yaml.safe_dump(summary, sort_keys=True)
    )
    write_table(
        out_dir / "effects.csv",
        ["pair", "tau_star", "variance", "active"],
        [
            [pair_label(*pair), effects.tau_star[k], effects.variance[k],
             int(effects.active[k])]
            for k, pair in enumerate(outcomes.pair_labels)
        ],
        metadata={"seed": args.seed, "variance_floor": floor, "link": link_kind},
    )
    inference_rows = []
    for k, pair in enumerate(outcomes.pair_labels):
        if not effects.active[k]:
            continue
        lo, hi = result.intervals[pair]
        stage = ""
        if pair in rejected_order:
            idx = rejected_order[pair]
            stage = (f"stepdown:{idx + 1}" if idx < result.stepdown_rejections
                     else "augmented")
        inference_rows.append([
            pair_label(*pair), effects.tau_star[k], effects.variance[k],
            result.standardized[pair], lo, hi,
            int(pair in rejected_order), stage,
        ])
    write_table(
        out_dir / "inference.csv",
        ["pair", "tau_star", "variance", "t_stat", "ci_lower", "ci_upper",
         "rejected", "stage"],
        inference_rows,
        metadata={"seed": args.seed, "alpha": boot.alpha,
                  "fdp_threshold": boot.fdp_threshold,
                  "bootstrap_replications": boot.replications,
                  "quantile": result.quantile},
    )
    _echo(out_dir, _resolved_common(args, "estimate", {
        "outcomes": str(cfg["outcomes"]),
        "covariates": str(cfg["covariates"]),
        "treatment_column": cfg.get("treatment_column", "treatment"),
        "link": link_kind,
        "variance_floor": floor,
        "bootstrap": {
            "replications": boot.replications, "alpha": boot.alpha,
            "fdp_threshold": boot.fdp_threshold,
            "fresh_multipliers_per_step": boot.fresh_multipliers_per_step,
        },
    }))
    return 0


# --------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    dgp_cfg = _dgp_config(cfg.get("dgp"), int(args.seed))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((dgp_cfg.master_seed, 0, 0))
    dgp = build_dgp(dgp_cfg, rng)
    rng_subjects = np.random.default_rng((dgp_cfg.master_seed, 0, 1))
    W = rng_subjects.standard_normal((dgp_cfg.n, dgp_cfg.q)) + np.asarray(
        dgp_cfg.covariate_mean
    )
    beta = np.asarray(dgp_cfg.beta_true)
    prob = 1.0 / (1.0 + np.exp(-(W @ beta)))
    Z = (rng_subjects.random(dgp_cfg.n) < prob).astype(int)
    subjects = []
    for i in range(dgp_cfg.n):
        sid = f"s{i:04d}"
        process = dgp.process_for(W[i], int(Z[i]))
        panel = simulate_var(
            process, dgp_cfg.T, burn_in=dgp_cfg.burn_in,
            seed=np.random.default_rng((dgp_cfg.master_seed, 0, 2, i)),
        )
        write_panel_csv(out_dir / f"{sid}.csv", panel)
        subjects.append({"id": sid, "file": f"{sid}.csv"})
    table = CovariateTable(W, Z, tuple(s["id"] for s in subjects))
    write_covariates_csv(out_dir / "covariates.csv", table)
    manifest = {
        "subjects": subjects,
        "covariates": "covariates.csv",
        "treatment_column": "treatment",
    }
    (out_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
    _echo(out_dir, _resolved_common(args, "simulate", {
        "dgp": dataclasses.asdict(dgp_cfg),
        "truth_pairs": [pair_label(*pair) for pair in sorted(dgp.truth)],
    }))
    return 0


# ------------------------------------------------------------- experiment

def _cell_path(out_dir: Path, delta, n, p) -> Path:
    return out_dir / f"metrics_delta{delta:g}_n{n}_p{p}.csv"


METRICS_HEADER = ["method", "delta", "n", "p", "replications", "fwer", "power",
                  "fdp_mean", "fdpex", "bias_mean", "rmse"]


def _report_row(rep):
    return [rep.method, rep.delta, rep.n, rep.p, rep.replications, rep.fwer,
            rep.power, rep.fdp_mean, rep.fdpex, rep.bias_mean, rep.rmse]


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config)
    if args.preset == "desk":
        grid = list(DESK_GRID)
        replications = DESK_REPLICATIONS
    elif args.preset == "paper":
        grid = list(PAPER_GRID)
        replications = PAPER_REPLICATIONS
    else:
        grid = [tuple(cell) for cell in cfg.get("grid", DESK_GRID)]
        replications = int(cfg.get("replications", DESK_REPLICATIONS))
    if "replications" in cfg and args.preset is None:
        replications = int(cfg["replications"])
    method_names = cfg.get("methods", ["i", "ii", "iii", "iv"])
    try:
        methods = tuple(METHODS_BY_NAME[name] for name in method_names)
    except KeyError as exc:
        raise ConfigInvalid(f"unknown method {exc.args[0]!r}") from None
    seed = int(args.seed)
    dgp_cfg = _dgp_config(cfg.get("dgp"), seed)
    pipeline = PipelineConfig(
        split=_split_config(cfg.get("split")),
        bootstrap=_bootstrap_config(cfg.get("bootstrap"), seed),
        variance_floor=float(cfg.get("variance_floor", DEFAULT_VARIANCE_FLOOR)),
        link_kind=str(cfg.get("link", "logistic")),
    )
    write_details = bool(cfg.get("write_details", False))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = _resolved_common(args, "experiment", {
        "preset": args.preset,
        "grid": [list(cell) for cell in grid],
        "replications": replications,
        "methods": list(method_names),
        "dgp": dataclasses.asdict(replace(dgp_cfg, master_seed=seed)),
        "split": dataclasses.asdict(pipeline.split),
        "bootstrap": {
            "replications": pipeline.bootstrap.replications,
            "alpha": pipeline.bootstrap.alpha,
            "fdp_threshold": pipeline.bootstrap.fdp_threshold,
            "fresh_multipliers_per_step":
                pipeline.bootstrap.fresh_multipliers_per_step,
        },
        "variance_floor": pipeline.variance_floor,
        "link": pipeline.link_kind,
        "write_details": write_details,
    })
    _echo(out_dir, resolved)
    all_rows = []
    failures = []
    for delta, n, p in grid:
        cell_file = _cell_path(out_dir, float(delta), int(n), int(p))
        if cell_file.exists():
            _, rows = read_table(cell_file)
            all_rows.extend(rows)
            continue
        config = replace(dgp_cfg, delta=float(delta), n=int(n), p=int(p),
                         master_seed=seed)
        try:
            reports, details = run_cell(config, methods, pipeline, replications,
                                        threads=int(args.threads))
        except GcipwError as exc:
            failures.append((delta, n, p, repr(exc)))
            continue
        rows = [_report_row(reports[m.name]) for m in methods]
        write_table(cell_file, METRICS_HEADER, rows, metadata={
            "seed": seed, "replications": replications,
            "delta": float(delta), "n": int(n), "p": int(p),
            "params": resolved["dgp"],
        })
        if write_details:
            detail_rows = []
            for r, det in enumerate(details):
                for m in methods:
                    d = det[m.name]
                    detail_rows.append([
                        r, m.name, len(d.rejections), d.false_rejections(),
                        d.true_rejections(), len(d.truth), d.fdp(),
                        float(np.mean(d.tau_star)),
                    ])
            write_table(
                out_dir / f"details_delta{float(delta):g}_n{n}_p{p}.csv",
                ["replication", "method", "rejections", "false_rejections",
                 "true_rejections", "truth_size", "fdp", "mean_tau_star"],
                detail_rows,
                metadata={"seed": seed})
        _, rows_read = read_table(cell_file)
        all_rows.extend(rows_read)
    write_table(out_dir / "metrics.csv", METRICS_HEADER, all_rows,
                metadata={"seed": seed, "cells": len(grid),
                          "failed_cells": [list(f[:3]) for f in failures]})
    if failures:
        for delta, n, p, msg in failures:
            print(f"cell delta={delta} n={n} p={p} failed: {msg}", file=sys.stderr)
    return 0


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcipw",
        description="Granger-connectivity causal inference pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=_default_threads())

    p_derive = sub.add_parser("derive", help="derive per-subject connectivity")
    common(p_derive)
    p_derive.add_argument("--dataset", help="study manifest (overrides config)")
    p_derive.set_defaults(func=cmd_derive)

    p_est = sub.add_parser("estimate", help="IPW effects and simultaneous inference")
    common(p_est)
    p_est.add_argument("--outcomes", help="outcome panel CSV (overrides config)")
    p_est.add_argument("--covariates", help="covariate CSV (overrides config)")
    p_est.set_defaults(func=cmd_estimate)

    p_sim = sub.add_parser("simulate", help="write a synthetic study dataset")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_exp = sub.add_parser("experiment", help="run the Monte Carlo study")
    common(p_exp)
    p_exp.add_argument("--preset", choices=("desk", "paper"))
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GcipwError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
