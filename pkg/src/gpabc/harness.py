"""Experiment orchestration: four-algorithm comparisons, repeated-run
variability studies, posterior summaries and report emission.

An experiment plan names a model, dataset seeds and algorithms; running it
produces one cell per (algorithm, dataset, repetition) with posterior
summaries, counts and timings, written as ``report.json`` plus per-cell
population CSVs and plot-ready CSV files.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import abcsmc, dynamics, gp
from .abcsmc import (
    COMPONENT,
    OLCM,
    GradientSimulator,
    IntegrationSimulator,
    SamplerConfig,
    UniformPrior,
)

# algorithm name -> (distance kind, perturbation kernel)
ALGORITHMS = {
    "ABC-SMC-Comp": ("trajectory", COMPONENT),
    "ABC-SMC-OLCM": ("trajectory", OLCM),
    "GP-ABC-SMC": ("gradient", COMPONENT),
    "GP-ABC-OLCM": ("gradient", OLCM),
}

# benchmark defaults: particle count and quantile are shared; the generation
# counts differ between integration-based and gradient-based samplers, and
# the GP kernel family is per model
EXPERIMENT_DEFAULTS = {
    "lotka-volterra": {
        "generations": {"trajectory": 6, "gradient": 5},
        "gp_family": "se",
        "dataset_seeds": (12, 14, 16),
    },
    "hes1": {
        "generations": {"trajectory": 14, "gradient": 9},
        "gp_family": "se",
        "dataset_seeds": (1, 2, 3),
    },
    "cascade": {
        "generations": {"trajectory": 3, "gradient": 3},
        "gp_family": "mlp",
        "dataset_seeds": (1,),
    },
}


@dataclass
class ExperimentPlan:
    """One benchmark experiment: a model, seeded dataset realizations and a
    list of algorithms with shared sampler settings."""

    model: str
    dataset_seeds: tuple = None
    algorithms: tuple = tuple(ALGORITHMS)
    n_particles: int = 100
    alpha: float = 0.1
    generations: dict = None
    gp_family: str = None
    gp_restarts: int = 10
    repetitions: int = 1
    seed: int = 0
    n_jobs: int = 1
    # reference solver settings of the benchmark runs; looser than the
    # integrator defaults because the wide priors contain pathologically
    # expensive orbits
    rtol: float = 1e-3
    atol: float = 1e-6

    def __post_init__(self):
        if self.model not in EXPERIMENT_DEFAULTS:
            raise ValueError(f"unknown model {self.model!r}; available: {sorted(EXPERIMENT_DEFAULTS)}")
        defaults = EXPERIMENT_DEFAULTS[self.model]
        for name in self.algorithms:
            if name not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {name!r}; available: {sorted(ALGORITHMS)}")
        if self.dataset_seeds is None:
            self.dataset_seeds = tuple(defaults["dataset_seeds"])
        else:
            self.dataset_seeds = tuple(int(s) for s in self.dataset_seeds)
        if self.generations is None:
            self.generations = dict(defaults["generations"])
        if self.gp_family is None:
            self.gp_family = defaults["gp_family"]
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        self.algorithms = tuple(self.algorithms)

    def generations_for(self, algorithm):
        return int(self.generations[ALGORITHMS[algorithm][0]])

    def to_json(self):
        return {
            "model": self.model,
            "dataset_seeds": list(self.dataset_seeds),
            "algorithms": list(self.algorithms),
            "n_particles": self.n_particles,
            "alpha": self.alpha,
            "generations": self.generations,
            "gp_family": self.gp_family,
            "gp_restarts": self.gp_restarts,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "n_jobs": self.n_jobs,
        }

    @classmethod
    def from_json(cls, blob):
        if isinstance(blob, (str, Path)):
            blob = json.loads(Path(blob).read_text())
        return cls(**blob)


def cell_seed(plan_seed, dataset_seed, algorithm, repetition):
    """Deterministic per-cell sampler seed."""
    alg_index = list(ALGORITHMS).index(algorithm)
    ss = np.random.SeedSequence([plan_seed, dataset_seed, alg_index, repetition])
    return int(ss.generate_state(1)[0])


def weighted_quantile(values, weights, q):
    order = np.argsort(values)
    values, weights = np.asarray(values)[order], np.asarray(weights)[order]
    cum = np.cumsum(weights) - 0.5 * weights
    cum /= weights.sum()
    return float(np.interp(q, cum, values))


def summarize_population(pop):
    """Per-parameter weighted summary of one population.

    ``ci95`` is 1.96 times the weighted standard error of the mean (the
    narrow intervals reported for final populations); the 2.5/97.5
    posterior percentiles are emitted alongside.
    """
    w = pop.weights
    thetas = pop.thetas
    mean = w @ thetas
    var = w @ (thetas - mean) ** 2
    n_eff = 1.0 / float(np.sum(w**2))
    ci95 = 1.96 * np.sqrt(var / n_eff)
    q025 = np.array([weighted_quantile(thetas[:, j], w, 0.025) for j in range(thetas.shape[1])])
    q975 = np.array([weighted_quantile(thetas[:, j], w, 0.975) for j in range(thetas.shape[1])])
    return {
        "mean": mean,
        "variance": var,
        "ci95": ci95,
        "q025": q025,
        "q975": q975,
        "n_eff": n_eff,
    }


def reconstruct_trajectory(model, central_params, x0, t_grid, rtol=dynamics.DEFAULT_RTOL, atol=dynamics.DEFAULT_ATOL):
    """Integrate the model at central posterior parameters for comparison
    against the ground truth."""
    return dynamics.integrate(model, central_params, x0, t_grid, rtol=rtol, atol=atol)


def boxplot_stats(values):
    """Tukey box-plot summary: quartiles, 1.5*IQR whiskers clipped to the
    data, and the points beyond them."""
    values = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = values[(values >= lo_fence) & (values <= hi_fence)]
    outliers = values[(values < lo_fence) | (values > hi_fence)]
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_lo": float(inside.min()) if inside.size else float(med),
        "whisker_hi": float(inside.max()) if inside.size else float(med),
        "outliers": [float(v) for v in outliers],
        "n": int(values.size),
        "inside_fraction": float(inside.size / values.size),
    }


# ---------------------------------------------------------------------------
# cell execution
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    algorithm: str
    dataset_seed: int
    repetition: int
    status: str = "ok"
    error: str = None
    summary: dict = None
    accepted: int = 0
    generated: int = 0
    sampler_seconds: float = 0.0
    gp_fit_seconds: float = 0.0
    final_epsilon: float = None
    epsilons: list = field(default_factory=list)
    noise_sd: list = None
    sampler_seed: int = None
    result: object = None  # SamplerResult, not serialized

    @property
    def total_seconds(self):
        return self.sampler_seconds + self.gp_fit_seconds

    def to_json(self, param_names):
        blob = {
            "algorithm": self.algorithm,
            "dataset_seed": self.dataset_seed,
            "repetition": self.repetition,
            "status": self.status,
            "accepted": self.accepted,
            "generated": self.generated,
            "sampler_seconds": self.sampler_seconds,
            "gp_fit_seconds": self.gp_fit_seconds,
            "total_seconds": self.total_seconds,
            "final_epsilon": self.final_epsilon,
            "epsilons": self.epsilons,
            "noise_sd": self.noise_sd,
            "sampler_seed": self.sampler_seed,
        }
        if self.error:
            blob["error"] = self.error
        if self.summary is not None:
            blob["posterior"] = {
                name: {
                    "mean": float(self.summary["mean"][j]),
                    "ci95": float(self.summary["ci95"][j]),
                    "variance": float(self.summary["variance"][j]),
                    "q025": float(self.summary["q025"][j]),
                    "q975": float(self.summary["q975"][j]),
                }
                for j, name in enumerate(param_names)
            }
        return blob


def run_cell(plan, dataset, algorithm, repetition=0, smoothed=None):
    """Execute one (algorithm, dataset, repetition) cell.

    For gradient algorithms a SmoothedSystem is fitted (or reused if
    passed explicitly, in which case its fit time is counted here)."""
    model = dynamics.get_model(plan.model)
    prior = UniformPrior.for_model(model)
    distance_kind, kernel = ALGORITHMS[algorithm]
    seed = cell_seed(plan.seed, dataset.provenance["seed"] if dataset.provenance else 0, algorithm, repetition)
    cell = CellResult(
        algorithm=algorithm,
        dataset_seed=dataset.provenance["seed"] if dataset.provenance else 0,
        repetition=repetition,
        sampler_seed=seed,
    )
    try:
        if distance_kind == "gradient":
            if smoothed is None:
                smoothed = gp.smooth_dataset(
                    dataset, family=plan.gp_family, restarts=plan.gp_restarts, seed=seed
                )
            cell.gp_fit_seconds = smoothed.fit_seconds
            cell.noise_sd = [float(v) for v in smoothed.noise_sd]
            simulator = GradientSimulator.from_smoothed(smoothed, model)
            reference = smoothed.velocity_mean
        else:
            simulator = IntegrationSimulator(
                model=model, x0=model.initial_state, t_grid=dataset.times, rtol=plan.rtol, atol=plan.atol
            )
            reference = dataset.observations
        config = SamplerConfig(
            n_particles=plan.n_particles,
            n_generations=plan.generations_for(algorithm),
            alpha=plan.alpha,
            kernel=kernel,
            distance=distance_kind,
            seed=seed,
            n_jobs=plan.n_jobs,
        )
        result = abcsmc.run(config, prior, simulator, reference)
    except Exception as exc:
        cell.status = "failed"
        cell.error = f"{type(exc).__name__}: {exc}"
        return cell
    cell.result = result
    cell.summary = summarize_population(result.final_population)
    cell.accepted = result.total_accepted
    cell.generated = result.total_generated
    cell.sampler_seconds = result.total_seconds
    cell.final_epsilon = float(result.final_population.tolerance)
    cell.epsilons = [float(p.tolerance) for p in result.populations]
    return cell


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    plan: ExperimentPlan
    cells: list

    def to_json(self):
        names = dynamics.get_model(self.plan.model).param_names
        return {
            "plan": self.plan.to_json(),
            "param_names": list(names),
            "true_params": [float(v) for v in dynamics.get_model(self.plan.model).true_params],
            "cells": [c.to_json(names) for c in self.cells],
        }

    def cells_for(self, algorithm=None, dataset_seed=None):
        out = self.cells
        if algorithm is not None:
            out = [c for c in out if c.algorithm == algorithm]
        if dataset_seed is not None:
            out = [c for c in out if c.dataset_seed == dataset_seed]
        return out


def _write_plot_files(plots_dir, model, dataset, cell):
    """Plot-ready CSVs: posterior particle values per parameter, and the
    trajectory overlay at the posterior mean."""
    tag = f"{model.name}_{cell.algorithm}_d{cell.dataset_seed}_r{cell.repetition}"
    pop = cell.result.final_population
    with open(plots_dir / f"posterior_{tag}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*model.param_names, "weight"])
        for i in range(pop.accepted_count):
            writer.writerow([*[repr(float(v)) for v in pop.thetas[i]], repr(float(pop.weights[i]))])
    try:
        recon = reconstruct_trajectory(
            model, pop.weights @ pop.thetas, model.initial_state, dataset.times
        )
        truth = dynamics.integrate(model, model.true_params, model.initial_state, dataset.times)
    except dynamics.IntegrationError:
        return
    with open(plots_dir / f"trajectory_{tag}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        names = model.state_names
        writer.writerow(
            ["t", *[f"obs_{n}" for n in names], *[f"true_{n}" for n in names], *[f"recon_{n}" for n in names]]
        )
        for j, t in enumerate(dataset.times):
            writer.writerow(
                [
                    repr(float(t)),
                    *[repr(float(v)) for v in dataset.observations[:, j]],
                    *[repr(float(v)) for v in truth.states[:, j]],
                    *[repr(float(v)) for v in recon.states[:, j]],
                ]
            )


def run_experiment(plan, out_dir=None):
    """Execute every (algorithm, dataset seed, repetition) cell of a plan.

    Failed cells are isolated and recorded with their error.  When
    ``out_dir`` is given, writes report.json, populations/*.csv and
    plots/*.csv underneath it."""
    model = dynamics.get_model(plan.model)
    cells = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "populations").mkdir(parents=True, exist_ok=True)
        (out_dir / "plots").mkdir(parents=True, exist_ok=True)
    for dataset_seed in plan.dataset_seeds:
        dataset = dynamics.generate_reference_dataset(plan.model, seed=dataset_seed)
        for algorithm in plan.algorithms:
            for rep in range(plan.repetitions):
                cell = run_cell(plan, dataset, algorithm, repetition=rep)
                cells.append(cell)
                if out_dir is not None and cell.status == "ok":
                    tag = f"{plan.model}_{algorithm}_d{dataset_seed}_r{rep}"
                    cell.result.save_populations_csv(out_dir / "populations" / f"{tag}.csv")
                    _write_plot_files(out_dir / "plots", model, dataset, cell)
    report = RunReport(plan=plan, cells=cells)
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    return report


def variability_study(plan, out_dir=None):
    """Repeat each (algorithm, dataset) cell ``plan.repetitions`` times and
    summarize the distributions of the run-level posterior means and
    variances with Tukey box-plot statistics."""
    report = run_experiment(plan, out_dir=out_dir)
    model = dynamics.get_model(plan.model)
    study = {"plan": plan.to_json(), "cells": {}, "failed_runs": 0, "completed_runs": 0}
    for algorithm in plan.algorithms:
        for dataset_seed in plan.dataset_seeds:
            cells = report.cells_for(algorithm, dataset_seed)
            ok = [c for c in cells if c.status == "ok"]
            study["failed_runs"] += len(cells) - len(ok)
            study["completed_runs"] += len(ok)
            if not ok:
                continue
            entry = {}
            for j, name in enumerate(model.param_names):
                means = [float(c.summary["mean"][j]) for c in ok]
                variances = [float(c.summary["variance"][j]) for c in ok]
                entry[name] = {
                    "mean": boxplot_stats(means),
                    "variance": boxplot_stats(variances),
                }
            study["cells"][f"{algorithm}|d{dataset_seed}"] = entry
    if out_dir is not None:
        Path(out_dir, "variability.json").write_text(json.dumps(study, indent=2))
    return report, study
