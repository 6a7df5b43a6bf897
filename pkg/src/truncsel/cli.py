"""Batch command-line interface.

Subcommands: ``simulate`` (emit survey and truncated CSVs), ``fit-lca``,
``fit`` (refined / monolithic / scad), ``study``, and ``report``.  Global
flags: ``--config`` (JSON file), ``--seed``, ``--out``, ``--jobs``.  Exit
codes: 0 success, 1 validation error, 2 study abort.
"""

import argparse
import json
import os
import sys
from pathlib import Path

# pin BLAS threading before numpy loads so results do not depend on --jobs
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np

from .data import load_csv, save_csv
from .dgp import DgpSpec, generate_population, generate_survey, truncate
from .errors import AllReplicationsFailed, StudyAborted, TruncselError
from .estimator import PlsimConfig, build_bundle, fit_plsim
from .harness import StudyConfig, StudySummary, emit_report, run_study
from .lca import LcaConfig, LcaModel, assign_labels, fit_lca
from .data import LabeledDataset
from .opinion import partition_opinions
from .penalty import PathConfig, fit_penalized_path, select_class_count
from .sieve import SieveSpec


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _dgp_from_config(cfg, seed_override=None):
    spec = DgpSpec.from_json_dict(cfg.get("dgp", {}))
    if seed_override is not None:
        from dataclasses import replace
        spec = replace(spec, seed=seed_override)
    return spec


def _study_config(cfg, args):
    study = cfg.get("study", {})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    kwargs = dict(
        dgp=_dgp_from_config(cfg, seed),
        seed=seed,
        jobs=args.jobs,
    )
    if args.reps is not None:
        kwargs["replications"] = args.reps
    elif "replications" in study:
        kwargs["replications"] = study["replications"]
    if args.sizes is not None:
        kwargs["sample_sizes"] = tuple(int(s) for s in args.sizes.split(","))
    elif "sample_sizes" in study:
        kwargs["sample_sizes"] = tuple(study["sample_sizes"])
    if args.estimators is not None:
        kwargs["estimators"] = tuple(args.estimators.split(","))
    elif "estimators" in study:
        kwargs["estimators"] = tuple(study["estimators"])
    if "g_max" in study:
        kwargs["g_max"] = study["g_max"]
    if "sieve" in study:
        kwargs["sieve"] = SieveSpec(**study["sieve"])
    if "lca" in study:
        kwargs["lca"] = LcaConfig(**study["lca"])
    if "plsim" in study:
        kwargs["plsim"] = PlsimConfig(**study["plsim"])
    if "penalty" in study:
        kwargs["penalty"] = PathConfig(**study["penalty"])
    return StudyConfig(**kwargs)


def _cmd_simulate(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    spec = _dgp_from_config(cfg, seed)
    if args.size is not None:
        from dataclasses import replace
        spec = replace(spec, n_population=args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    survey = generate_survey(spec, np.random.default_rng([spec.seed, 1]))
    population = generate_population(spec, np.random.default_rng([spec.seed, 2]))
    truncated = truncate(population)
    save_csv(survey, out / "survey.csv")
    save_csv(truncated, out / "truncated.csv")
    print(f"wrote {out / 'survey.csv'} ({survey.n_experts} experts) and "
          f"{out / 'truncated.csv'} ({truncated.n} of {population.n} rows kept)")
    return 0


def _cmd_fit_lca(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    survey = load_csv(args.survey, "survey")
    model, _ = fit_lca(survey, args.k, LcaConfig(seed=seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"lca_k{args.k}.json"
    model.save(path)
    print(f"wrote {path} (logL={model.log_likelihood:.4f}, "
          f"converged={model.converged})")
    return 0


def _cmd_fit(args):
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    survey = load_csv(args.survey, "survey")
    truncated = load_csv(args.truncated, "truncated")
    study = cfg.get("study", {})
    sieve = SieveSpec(**study["sieve"]) if "sieve" in study else SieveSpec()
    if args.mode == "refined":
        ks = [args.k]
    elif args.mode == "monolithic":
        ks = [1]
    else:
        ks = list(range(1, args.g_max + 1))
    seeds = np.random.SeedSequence(seed).generate_state(len(ks) + 1)
    assignments = {}
    for i, k in enumerate(ks):
        model, post = fit_lca(survey, k, LcaConfig(seed=int(seeds[i])))
        labels_survey = np.argmax(post.values, axis=1) + 1
        space = partition_opinions(LabeledDataset(survey, labels_survey, k))
        labels = assign_labels(model, truncated.responses, truncated.x)
        assignments[k] = (labels, space)
    bundle = build_bundle(truncated, assignments=assignments)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "scad":
        path = fit_penalized_path(bundle, sieve,
                                  config=PathConfig(plsim=PlsimConfig(seed=int(seeds[-1]))))
        sel = path.selected
        result = {
            "mode": "scad",
            "selected_lambda": sel.lam,
            "selected_count": select_class_count(path),
            "theta": sel.params[:truncated.w.shape[1]].tolist(),
            "beta": sel.beta.tolist(),
            "bic": sel.bic,
            "mse": sel.mse,
            "path": [[e.lam, e.mse, e.df, e.bic] for e in path.entries],
        }
        dest = out / "fit_scad.json"
        with open(dest, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
    else:
        fit = fit_plsim(bundle, sieve, PlsimConfig(seed=int(seeds[-1])))
        dest = out / f"fit_{args.mode}.json"
        fit.save(dest)
    print(f"wrote {dest}")
    return 0


def _cmd_study(args):
    cfg = _load_config(args.config)
    config = _study_config(cfg, args)
    summary = run_study(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary.save(out / "summary.json")
    emit_report(summary, "csv", out / "report.csv")
    emit_report(summary, "markdown", out / "report.md")
    print(f"wrote {out / 'summary.json'}, {out / 'report.csv'}, {out / 'report.md'}")
    return 0


def _cmd_report(args):
    summary = StudySummary.load(args.summary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "csv" if args.format == "csv" else "md"
    dest = emit_report(summary, args.format, out / f"report.{suffix}")
    print(f"wrote {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="truncsel",
        description="Endogenous truncation bias correction: simulate, fit, study.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="emit survey and truncated CSVs")
    p.add_argument("--size", type=int, default=None, help="population size")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit-lca", help="fit the latent class model")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--survey", required=True)
    p.set_defaults(func=_cmd_fit_lca)

    p = sub.add_parser("fit", help="fit a truncation-corrected estimator")
    p.add_argument("--mode", choices=("refined", "monolithic", "scad"), required=True)
    p.add_argument("--survey", required=True)
    p.add_argument("--truncated", required=True)
    p.add_argument("--k", type=int, default=3, help="class count for refined mode")
    p.add_argument("--g-max", type=int, default=6, dest="g_max")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("study", help="run a Monte Carlo study")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--sizes", default=None, help="comma-separated sample sizes")
    p.add_argument("--estimators", default=None, help="comma-separated estimator names")
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("report", help="render a saved study summary")
    p.add_argument("--summary", required=True, help="summary.json path")
    p.add_argument("--format", choices=("csv", "markdown"), required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (StudyAborted, AllReplicationsFailed) as exc:
        print(f"study aborted: {exc}", file=sys.stderr)
        return 2
    except TruncselError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
