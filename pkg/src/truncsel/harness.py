"""Monte Carlo study driver: replicate, estimate, aggregate, report.

A replication generates one survey and one population at the requested size,
truncates, and runs the configured estimator set.  Replications are
independent work items seeded only by (master seed, sample size, replication
index, stage), so results are identical at any parallelism degree.  Failed
replications are recorded with their reason and excluded from aggregates; a
study aborts once failures exceed a configurable share.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset
from .dgp import (DgpSpec, WeightCache, generate_population, generate_survey,
                  truncate, weight_cache_key)
from .errors import AllReplicationsFailed, IoError, StudyAborted, TruncselError
from .estimator import PlsimConfig, build_bundle, fit_ols, fit_plsim
from .lca import LcaConfig, fit_lca, assign_labels
from .opinion import partition_opinions
from .penalty import PathConfig, fit_penalized_path, select_class_count
from .sieve import SieveSpec

ESTIMATORS = ("ols_full", "ols_truncated", "refined", "monolithic",
              "scad_path", "unpenalized_multi")

# stage tags for per-replication stream derivation
_STAGE_SURVEY = 1
_STAGE_POPULATION = 2
_STAGE_LCA = 3
_STAGE_FIT = 4

# per-process equilibrium-weight caches; values are deterministic per key, so
# sharing across replications (or duplicating across workers) is exact
_WEIGHT_CACHES = {}


def _shared_cache(spec: DgpSpec) -> WeightCache:
    key = weight_cache_key(spec)
    if key not in _WEIGHT_CACHES:
        _WEIGHT_CACHES[key] = WeightCache()
    return _WEIGHT_CACHES[key]


@dataclass(frozen=True)
class StudyConfig:
    dgp: DgpSpec = DgpSpec()
    replications: int = 100
    sample_sizes: tuple = (2000,)
    estimators: tuple = ("ols_full", "ols_truncated", "refined", "monolithic")
    sieve: SieveSpec = SieveSpec(family="fourier", n_terms=4)
    lca: LcaConfig = LcaConfig()
    penalty: PathConfig = PathConfig()
    plsim: PlsimConfig = PlsimConfig()
    g_max: int = 6
    seed: int = 0
    jobs: int = 1
    failure_cap: float = 0.2

    def __post_init__(self):
        if self.replications < 1:
            raise TruncselError("replications must be >= 1")
        if not self.estimators:
            raise TruncselError("estimator set must be nonempty")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise TruncselError(f"unknown estimators {sorted(unknown)}")


@dataclass(frozen=True)
class StudySummary:
    config_seed: int
    sample_sizes: tuple
    estimators: tuple
    raw: dict          # estimator -> size -> param -> list of floats
    aggregates: dict   # estimator -> size -> param -> {mean, median, std}
    count_histogram: dict  # size -> {selected count -> occurrences}
    n_failures: dict   # size -> count
    failures: tuple    # (size, replication index, reason)

    def to_json_dict(self) -> dict:
        return {
            "config_seed": self.config_seed,
            "sample_sizes": list(self.sample_sizes),
            "estimators": list(self.estimators),
            "raw": self.raw,
            "aggregates": self.aggregates,
            "count_histogram": {str(k): v for k, v in self.count_histogram.items()},
            "n_failures": {str(k): v for k, v in self.n_failures.items()},
            "failures": [list(f) for f in self.failures],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "StudySummary":
        return cls(
            config_seed=d["config_seed"],
            sample_sizes=tuple(d["sample_sizes"]),
            estimators=tuple(d["estimators"]),
            raw=d["raw"],
            aggregates=d["aggregates"],
            count_histogram={int(k): {int(c): n for c, n in v.items()}
                             for k, v in d["count_histogram"].items()},
            n_failures={int(k): v for k, v in d["n_failures"].items()},
            failures=tuple(tuple(f) for f in d["failures"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "StudySummary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _stream(config: StudyConfig, sample_size: int, rep: int, stage: int):
    return np.random.default_rng([config.seed, sample_size, rep, stage])


def _needed_class_counts(config: StudyConfig):
    ks = set()
    if "refined" in config.estimators:
        ks.add(config.dgp.class_count)
    if "monolithic" in config.estimators:
        ks.add(1)
    if "scad_path" in config.estimators or "unpenalized_multi" in config.estimators:
        ks.update(range(1, config.g_max + 1))
    return sorted(ks)


def run_replication(config: StudyConfig, sample_size: int, rep: int,
                    oracle_labels: bool = False) -> dict:
    """One replication; returns {estimator: {statistic: value}}.

    ``oracle_labels`` is a test hook substituting the generating classes for
    the fitted labels in the refined estimator.
    """
    spec = replace(config.dgp, n_population=sample_size)
    out = {}
    population = generate_population(spec, _stream(config, sample_size, rep,
                                                   _STAGE_POPULATION),
                                     cache=_shared_cache(spec))
    full_design = np.column_stack([np.ones(population.n),
                                   population.substantive_design()])
    if "ols_full" in config.estimators:
        coef = fit_ols(population.y1_star, full_design)
        out["ols_full"] = {"theta1": float(coef[1]), "theta2": float(coef[2])}
    truncated = truncate(population)
    kept = population.y2_star >= 0.0
    if "ols_truncated" in config.estimators:
        design = np.column_stack([np.ones(truncated.n), truncated.w])
        coef = fit_ols(truncated.y1, design)
        out["ols_truncated"] = {"theta1": float(coef[1]), "theta2": float(coef[2])}

    needed = _needed_class_counts(config)
    if not needed:
        return out
    survey = generate_survey(spec, _stream(config, sample_size, rep, _STAGE_SURVEY))
    lca_seeds = np.random.SeedSequence(
        [config.seed, sample_size, rep, _STAGE_LCA]).generate_state(len(needed))
    assignments = {}
    for idx, k in enumerate(needed):
        lca_cfg = replace(config.lca, seed=int(lca_seeds[idx]))
        model, post = fit_lca(survey, k, lca_cfg)
        survey_labels = np.argmax(post.values, axis=1) + 1
        space = partition_opinions(LabeledDataset(survey, survey_labels, k))
        labels = assign_labels(model, truncated.responses, truncated.x)
        if oracle_labels and k == spec.class_count:
            labels = population.classes[kept]
        assignments[k] = (labels, space)

    fit_seed_root = np.random.SeedSequence([config.seed, sample_size, rep, _STAGE_FIT])
    fit_seeds = fit_seed_root.generate_state(4)

    def plsim_cfg(i):
        return replace(config.plsim, seed=int(fit_seeds[i]))

    if "refined" in config.estimators:
        bundle = build_bundle(truncated,
                              assignments={spec.class_count: assignments[spec.class_count]})
        fit = fit_plsim(bundle, config.sieve, plsim_cfg(0))
        out["refined"] = {"theta1": float(fit.theta[0]), "theta2": float(fit.theta[1]),
                          "converged": float(fit.converged)}
    if "monolithic" in config.estimators:
        bundle = build_bundle(truncated, assignments={1: assignments[1]})
        fit = fit_plsim(bundle, config.sieve, plsim_cfg(1))
        out["monolithic"] = {"theta1": float(fit.theta[0]), "theta2": float(fit.theta[1]),
                             "converged": float(fit.converged)}
    if "scad_path" in config.estimators or "unpenalized_multi" in config.estimators:
        multi = {k: assignments[k] for k in range(1, config.g_max + 1)}
        bundle = build_bundle(truncated, assignments=multi)
        if "unpenalized_multi" in config.estimators:
            fit = fit_plsim(bundle, config.sieve, plsim_cfg(2))
            out["unpenalized_multi"] = {"theta1": float(fit.theta[0]),
                                        "theta2": float(fit.theta[1]),
                                        "converged": float(fit.converged)}
        if "scad_path" in config.estimators:
            pcfg = replace(config.penalty, plsim=plsim_cfg(3))
            path = fit_penalized_path(bundle, config.sieve, config=pcfg)
            sel = path.selected
            out["scad_path"] = {"theta1": float(sel.params[0]),
                                "theta2": float(sel.params[1]),
                                "selected_count": float(select_class_count(path))}
    return out


def _run_one(args):
    config, sample_size, rep = args
    try:
        return (sample_size, rep, run_replication(config, sample_size, rep), None)
    except TruncselError as exc:  # record-and-continue failure policy
        return (sample_size, rep, None, f"{type(exc).__name__}: {exc}")


def run_study(config: StudyConfig) -> StudySummary:
    """Run all replications and aggregate mean/median/SD per cell."""
    tasks = [(config, size, rep)
             for size in config.sample_sizes
             for rep in range(config.replications)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=1))
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1]))

    raw = {est: {str(size): {} for size in config.sample_sizes}
           for est in config.estimators}
    hist = {size: {} for size in config.sample_sizes}
    n_fail = {size: 0 for size in config.sample_sizes}
    failures = []
    total = len(tasks)
    for size, rep, payload, reason in results:
        if payload is None:
            n_fail[size] += 1
            failures.append((size, rep, reason))
            continue
        for est, stats in payload.items():
            if est not in raw:
                continue
            for param, value in stats.items():
                if est == "scad_path" and param == "selected_count":
                    key = int(value)
                    hist[size][key] = hist[size].get(key, 0) + 1
                raw[est][str(size)].setdefault(param, []).append(float(value))
    total_failures = sum(n_fail.values())
    if total_failures == total:
        raise AllReplicationsFailed("every replication failed; first reason: "
                                    + failures[0][2])
    if total_failures > config.failure_cap * total:
        raise StudyAborted(f"{total_failures}/{total} replications failed "
                           f"(cap {config.failure_cap:.0%})")

    aggregates = {}
    for est in config.estimators:
        aggregates[est] = {}
        for size in config.sample_sizes:
            cell = {}
            for param, values in sorted(raw[est][str(size)].items()):
                arr = np.asarray(values, dtype=float)
                cell[param] = {
                    "mean": float(arr.mean()),
                    "median": float(np.median(arr)),
                    "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                }
            aggregates[est][str(size)] = cell
    return StudySummary(
        config_seed=config.seed,
        sample_sizes=tuple(config.sample_sizes),
        estimators=tuple(config.estimators),
        raw=raw,
        aggregates=aggregates,
        count_histogram=hist,
        n_failures=n_fail,
        failures=tuple(failures),
    )


_REPORT_PARAMS = ("theta1", "theta2")
_REPORT_STATS = (("mean", "Mean"), ("median", "Median"), ("std", "Std"))


def emit_report(summary: StudySummary, fmt: str, path) -> str:
    """Write the per-estimator summary tables; returns the path written.

    One table per estimator: rows are parameter x {Mean, Median, Std}, one
    column per sample size (ascending).  CSV carries 17-digit reals so values
    re-parse exactly; markdown rounds to four decimals.
    """
    if fmt not in ("csv", "markdown"):
        raise IoError(f"unknown report format {fmt!r}")
    sizes = sorted(summary.sample_sizes)
    lines = []
    if fmt == "csv":
        lines.append(",".join(["estimator", "parameter", "statistic"]
                              + [str(s) for s in sizes]))
        for est in summary.estimators:
            for param in _REPORT_PARAMS:
                for key, label in _REPORT_STATS:
                    row = [est, param, label]
                    for size in sizes:
                        cell = summary.aggregates[est][str(size)].get(param)
                        row.append("%.17g" % cell[key] if cell else "")
                    lines.append(",".join(row))
        if any(summary.count_histogram.values()):
            lines.append("")
            counts = sorted({c for v in summary.count_histogram.values() for c in v})
            lines.append(",".join(["selected_count", ""] + [str(s) for s in sizes]))
            for c in counts:
                row = [str(c), ""]
                row += [str(summary.count_histogram.get(size, {}).get(c, 0))
                        for size in sizes]
                lines.append(",".join(row))
    else:
        for est in summary.estimators:
            lines.append(f"## {est}")
            lines.append("")
            lines.append("| Parameter | Estimate | " + " | ".join(str(s) for s in sizes) + " |")
            lines.append("|---|---|" + "---|" * len(sizes))
            for param in _REPORT_PARAMS:
                for key, label in _REPORT_STATS:
                    row = [param if key == "mean" else "", label]
                    for size in sizes:
                        cell = summary.aggregates[est][str(size)].get(param)
                        row.append("%.4f" % cell[key] if cell else "")
                    lines.append("| " + " | ".join(row) + " |")
            lines.append("")
        if any(summary.count_histogram.values()):
            lines.append("## selected class counts")
            lines.append("")
            counts = sorted({c for v in summary.count_histogram.values() for c in v})
            lines.append("| Count | " + " | ".join(str(s) for s in sizes) + " |")
            lines.append("|---|" + "---|" * len(sizes))
            for c in counts:
                row = [str(c)]
                row += [str(summary.count_histogram.get(size, {}).get(c, 0))
                        for size in sizes]
                lines.append("| " + " | ".join(row) + " |")
            lines.append("")
    text = "\n".join(lines) + "\n"
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write report {path!r}: {exc}") from exc
    return str(path)
