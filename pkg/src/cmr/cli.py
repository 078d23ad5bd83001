"""Command-line front end for the experiment harnesses and pipelines.

Every subcommand materializes its fully resolved scientific config into the
output directory before computing, so runs are self-describing and a given
resolved config always produces byte-identical result files. Flags override
JSON config values; JSON overrides defaults.

Exit codes: 0 success, 1 config/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .errors import CmrError
from .estimator import RefineConfig
from .experiments import (
    AConcentrationConfig,
    BoundCheckConfig,
    BSweepConfig,
    GammaConcentrationConfig,
    GradCheckConfig,
    PhaseGridConfig,
    config_as_dict,
    fmt17,
    run_a_concentration,
    run_b_sweep,
    run_bound_check,
    run_gamma_concentration,
    run_gradient_check,
    run_phase_diagram,
    write_concentration_csv,
    write_concentration_summary_csv,
    write_phase_pgm,
    write_phase_summary_csv,
    write_sweep_summary_csv,
    write_trials_csv,
)
from .model import divergence_coefficients, load_model
from .vision import (
    UpliftMap,
    all_digit_pairs,
    block_reshape_batch,
    read_idx,
    run_pair_classification,
    synthetic_digits,
    uplift_batch,
    write_accuracy_csv,
)

DATA_DIR_ENV = "CMR_DATA_DIR"


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def _build_config(cls, file_doc: dict, overrides: dict, refine_overrides: dict | None = None):
    """defaults <- JSON file <- explicitly set flags, then validate."""
    values = {}
    known = {f.name for f in fields(cls)}
    for key, val in file_doc.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        values[key] = val
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    if "refine" in known:
        base = values.get("refine")
        base = dict(base) if isinstance(base, dict) else {}
        base.update(refine_overrides or {})
        if base or "refine" in values:
            values["refine"] = RefineConfig(**base)
    for key in ("i_values", "t_values", "b_values"):
        if key in values:
            values[key] = tuple(int(v) for v in values[key])
    return cls(**values)


def _make_outdir(outdir: str, subcommand: str, label: str | None) -> str:
    stamp = label if label else time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(outdir, f"{subcommand}-{stamp}")
    suffix = 0
    candidate = path
    while os.path.exists(candidate):
        suffix += 1
        candidate = f"{path}-{suffix}"
    os.makedirs(candidate)
    return candidate


def _echo_config(run_dir: str, cfg) -> None:
    doc = config_as_dict(cfg) if not isinstance(cfg, dict) else cfg
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _refine_overrides(args) -> dict:
    keys = ("max_iters", "step_size", "grad_tol", "ridge")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _cmd_phase(args) -> int:
    file_doc = _load_config_file(args.config) if args.config else {}
    cfg = _build_config(
        PhaseGridConfig,
        file_doc,
        {
            "b": args.b,
            "p": args.p,
            "r": args.r,
            "i_values": _int_list(args.i_values) if args.i_values else None,
            "t_values": _int_list(args.t_values) if args.t_values else None,
            "trials_per_cell": args.trials,
            "master_seed": args.seed,
            "init_mode": args.init,
            "success_threshold": args.threshold,
        },
        refine_overrides=_refine_overrides(args),
    )
    run_dir = _make_outdir(args.outdir, "phase", args.label)
    _echo_config(run_dir, cfg)
    result = run_phase_diagram(cfg, threads=args.threads)
    write_trials_csv(os.path.join(run_dir, "trials.csv"), result.records)
    write_phase_summary_csv(os.path.join(run_dir, "summary.csv"), result)
    write_phase_pgm(os.path.join(run_dir, "heatmap.pgm"), result)
    print(
        f"phase: init={cfg.init_mode} grid {len(cfg.i_values)}x{len(cfg.t_values)} "
        f"trials={cfg.trials_per_cell} mean_success={fmt17(float(np.mean(result.success_rate)))} "
        f"-> {run_dir}"
    )
    return 0


def _cmd_sweep_b(args) -> int:
    file_doc = _load_config_file(args.config) if args.config else {}
    cfg = _build_config(
        BSweepConfig,
        file_doc,
        {
            "b_values": _int_list(args.b_values) if args.b_values else None,
            "p": args.p,
            "r": args.r,
            "i_tasks": args.i,
            "t_samples": args.t,
            "trials_per_cell": args.trials,
            "master_seed": args.seed,
            "init_mode": args.init,
            "success_threshold": args.threshold,
        },
        refine_overrides=_refine_overrides(args),
    )
    run_dir = _make_outdir(args.outdir, "sweep-b", args.label)
    _echo_config(run_dir, cfg)
    result = run_b_sweep(cfg, threads=args.threads)
    write_trials_csv(os.path.join(run_dir, "trials.csv"), result.records,
                     cell_names=("b_value", "t_value"))
    write_sweep_summary_csv(os.path.join(run_dir, "summary.csv"), result)
    rates = " ".join(fmt17(r) for r in result.success_rate)
    print(f"sweep-b: b_values={list(cfg.b_values)} success_rates=[{rates}] -> {run_dir}")
    return 0


def _cmd_verify_lemma1(args) -> int:
    file_doc = _load_config_file(args.config) if args.config else {}
    cfg = _build_config(
        AConcentrationConfig,
        file_doc,
        {
            "b": args.b,
            "p": args.p,
            "r": args.r,
            "t_samples": args.t,
            "i_values": _int_list(args.i_values) if args.i_values else None,
            "repetitions": args.reps,
            "master_seed": args.seed,
            "random_cov": None if args.identity_cov is None else not args.identity_cov,
        },
    )
    run_dir = _make_outdir(args.outdir, "verify-lemma1", args.label)
    _echo_config(run_dir, cfg)
    report = run_a_concentration(cfg)
    write_concentration_csv(os.path.join(run_dir, "errors.csv"), report, kind="rate")
    write_concentration_summary_csv(os.path.join(run_dir, "summary.csv"), report)
    meds = " ".join(fmt17(m) for m in report.median_errors)
    ratios = " ".join(fmt17(r) for r in report.median_ratios())
    print(
        f"verify-lemma1: sizes={report.sample_sizes} medians=[{meds}] "
        f"ratios=[{ratios}] mean_rel_err={fmt17(report.mean_rel_errors[0])} -> {run_dir}"
    )
    return 0


def _cmd_verify_lemma2(args) -> int:
    file_doc = _load_config_file(args.config) if args.config else {}
    cfg = _build_config(
        GammaConcentrationConfig,
        file_doc,
        {
            "b": args.b,
            "p": args.p,
            "t_samples": args.t,
            "i_values": _int_list(args.i_values) if args.i_values else None,
            "repetitions": args.reps,
            "master_seed": args.seed,
            "random_cov": None if args.identity_cov is None else not args.identity_cov,
        },
    )
    run_dir = _make_outdir(args.outdir, "verify-lemma2", args.label)
    _echo_config(run_dir, cfg)
    report = run_gamma_concentration(cfg)
    write_concentration_csv(os.path.join(run_dir, "errors.csv"), report, kind="rate")
    write_concentration_summary_csv(os.path.join(run_dir, "summary.csv"), report)
    meds = " ".join(fmt17(m) for m in report.median_errors)
    ratios = " ".join(fmt17(r) for r in report.median_ratios())
    print(
        f"verify-lemma2: sizes={report.sample_sizes} medians=[{meds}] "
        f"ratios=[{ratios}] -> {run_dir}"
    )
    return 0


def _cmd_verify_lemma3(args) -> int:
    file_doc = _load_config_file(args.config) if args.config else {}
    cfg = _build_config(
        BoundCheckConfig,
        file_doc,
        {
            "b": args.b,
            "p": args.p,
            "r": args.r,
            "i_tasks": args.i,
            "t_samples": args.t,
            "trials": args.trials,
            "master_seed": args.seed,
            "random_cov": None if args.identity_cov is None else not args.identity_cov,
        },
    )
    run_dir = _make_outdir(args.outdir, "verify-lemma3", args.label)
    _echo_config(run_dir, cfg)
    report = run_bound_check(cfg, threads=args.threads)
    write_concentration_csv(os.path.join(run_dir, "trials.csv"), report, kind="bound")
    print(
        f"verify-lemma3: {report.bound_violations} violations / "
        f"{report.valid_trials} valid trials ({report.excluded_trials} excluded) -> {run_dir}"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    file_doc = _load_config_file(args.config) if args.config else {}
    cfg = _build_config(
        GradCheckConfig,
        file_doc,
        {"instances": args.instances, "master_seed": args.seed},
    )
    run_dir = _make_outdir(args.outdir, "gradcheck", args.label)
    _echo_config(run_dir, cfg)
    max_err, rows = run_gradient_check(cfg)
    lines = ["instance,seed,max_rel_error"]
    for instance, seed, err in rows:
        lines.append(f"{instance},{seed},{fmt17(err)}")
    with open(os.path.join(run_dir, "gradcheck.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"gradcheck: {cfg.instances} instances max_rel_error={fmt17(max_err)} -> {run_dir}")
    return 0


def _load_image_data(args):
    data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV)
    if data_dir:
        images = read_idx(os.path.join(data_dir, "train-images-idx3-ubyte"))
        labels = read_idx(os.path.join(data_dir, "train-labels-idx1-ubyte"))
        return images, labels, {"source": "idx", "data_dir": data_dir}
    n_per_class = args.synthetic or 300
    raw, labels = synthetic_digits(n_per_class, seed=args.corpus_seed)
    return raw.astype(float) / 255.0, labels, {
        "source": "synthetic",
        "n_per_class": n_per_class,
        "corpus_seed": args.corpus_seed,
    }


def _cmd_classify(args) -> int:
    images, labels, source = _load_image_data(args)
    pairs = all_digit_pairs()[: args.pairs]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    master = args.seed if args.seed is not None else 0
    rep_seeds = [int(master) + 1000 * k for k in range(args.reps)]
    cfg = {
        "source": source,
        "pairs": pairs,
        "t_train": args.t_train,
        "t_test": args.t_test,
        "r": args.r,
        "block": args.block,
        "b_out": args.b_out,
        "uplift_seed": args.uplift_seed,
        "repetition_seeds": rep_seeds,
        "methods": methods,
        "ridge": args.ridge,
    }
    run_dir = _make_outdir(args.outdir, "classify", args.label)
    _echo_config(run_dir, cfg)
    raw_bands = block_reshape_batch(images, args.block)
    up = UpliftMap.create(args.b_out, raw_bands.shape[1], args.uplift_seed)
    bands = uplift_batch(raw_bands, up)
    tables = [
        run_pair_classification(
            bands, labels, pairs, args.t_train, args.r, method, rep_seeds,
            t_test=args.t_test, ridge=args.ridge,
        )
        for method in methods
    ]
    write_accuracy_csv(os.path.join(run_dir, "accuracy.csv"), tables)
    summary = " ".join(
        f"{t.method}={fmt17(t.mean_accuracy)}(ridge={fmt17(t.ridge)})" for t in tables
    )
    print(f"classify: pairs={len(pairs)} t_train={args.t_train} {summary} -> {run_dir}")
    return 0


def _cmd_diagnostics(args) -> int:
    model, cov, seed = load_model(args.model)
    run_dir = _make_outdir(args.outdir, "diagnostics", args.label)
    _echo_config(run_dir, {"model": os.path.abspath(args.model), "seed": seed})
    div = divergence_coefficients(model, cov)
    doc = {
        "eta": div.eta,
        "alpha": div.alpha,
        "mu": div.mu,
        "nu": div.nu,
        "psi": div.psi,
        "chi": div.chi,
        "kappa_gamma": div.kappa_gamma,
        "d": div.d,
        "m": div.m,
        "l": div.l,
        "l_per_task": div.l_per_task.tolist(),
    }
    with open(os.path.join(run_dir, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"diagnostics: eta={fmt17(div.eta)} nu={fmt17(div.nu)} psi={fmt17(div.psi)} "
        f"chi={fmt17(div.chi)} kappa_gamma={fmt17(div.kappa_gamma)} -> {run_dir}"
    )
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--outdir", default="results", help="output root directory")
    parser.add_argument("--label", help="run directory label (default: timestamp)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: available cores; never affects results)")
    parser.add_argument("--seed", type=int, default=None, help="master seed")


def _add_refine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-iters", dest="max_iters", type=int, default=None)
    parser.add_argument("--step-size", dest="step_size", type=float, default=None)
    parser.add_argument("--grad-tol", dest="grad_tol", type=float, default=None)
    parser.add_argument("--ridge", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmr",
        description="Multitask shared-mechanism recovery: experiments and pipelines",
    )
    sub = parser.add_subparsers(dest="subcommand")

    p = sub.add_parser("phase", help="recovery phase diagram over (tasks, samples)")
    _add_common(p)
    _add_refine_flags(p)
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--i-values", dest="i_values", default=None, help="comma list")
    p.add_argument("--t-values", dest="t_values", default=None, help="comma list")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--init", choices=("spectral", "random"), default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=_cmd_phase)

    p = sub.add_parser("sweep-b", help="success rate as the band dimension grows")
    _add_common(p)
    _add_refine_flags(p)
    p.add_argument("--b-values", dest="b_values", default=None, help="comma list")
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--i", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--init", choices=("spectral", "random"), default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=_cmd_sweep_b)

    p = sub.add_parser("verify-lemma1", help="moment-matrix concentration harness")
    _add_common(p)
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--i-values", dest="i_values", default=None, help="comma list")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--identity-cov", dest="identity_cov", action="store_const",
                   const=True, default=None)
    p.set_defaults(func=_cmd_verify_lemma1)

    p = sub.add_parser("verify-lemma2", help="shared-covariance concentration harness")
    _add_common(p)
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--i-values", dest="i_values", default=None, help="comma list")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--identity-cov", dest="identity_cov", action="store_const",
                   const=True, default=None)
    p.set_defaults(func=_cmd_verify_lemma2)

    p = sub.add_parser("verify-lemma3", help="deviation-to-recovery bound check")
    _add_common(p)
    p.add_argument("--b", type=int, default=None)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--i", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--identity-cov", dest="identity_cov", action="store_const",
                   const=True, default=None)
    p.set_defaults(func=_cmd_verify_lemma3)

    p = sub.add_parser("gradcheck", help="finite-difference check of the refinement gradients")
    _add_common(p)
    p.add_argument("--instances", type=int, default=None)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("classify", help="digit-pair classification study")
    _add_common(p)
    p.add_argument("--data-dir", dest="data_dir", default=None,
                   help=f"IDX directory (default: ${DATA_DIR_ENV} or synthetic corpus)")
    p.add_argument("--synthetic", type=int, default=None,
                   help="use the synthetic corpus with this many images per class")
    p.add_argument("--corpus-seed", dest="corpus_seed", type=int, default=1)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--t-train", dest="t_train", type=int, default=50)
    p.add_argument("--t-test", dest="t_test", type=int, default=200)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--b-out", dest="b_out", type=int, default=100)
    p.add_argument("--uplift-seed", dest="uplift_seed", type=int, default=7)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--methods", default="cmr,cmr1,frr")
    p.add_argument("--ridge", type=float, default=None)
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("diagnostics", help="task-divergence coefficients of a model file")
    _add_common(p)
    p.add_argument("--model", required=True, help="model JSON document")
    p.set_defaults(func=_cmd_diagnostics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_help()
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "subcommand", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except CmrError as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
