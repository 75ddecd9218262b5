"""Command-line front end: data generation, GP fit diagnostics, single
inference runs, and full benchmark reproduction.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime/inference
failure (partial results are saved where possible).  All randomness flows
from --seed; omitting it derives a seed from system entropy and prints it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, abcsmc, dynamics, gp, harness

log = logging.getLogger("gpabc")

METHODS = {
    "abc-smc-comp": "ABC-SMC-Comp",
    "abc-smc-olcm": "ABC-SMC-OLCM",
    "gp-abc-smc": "GP-ABC-SMC",
    "gp-abc-olcm": "GP-ABC-OLCM",
}

EXPERIMENTS = ("lotka", "hes1", "cascade", "lotka-variability", "hes1-variability")

_EXPERIMENT_MODELS = {
    "lotka": "lotka-volterra",
    "lotka-variability": "lotka-volterra",
    "hes1": "hes1",
    "hes1-variability": "hes1",
    "cascade": "cascade",
}


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("ABC_LOG", "WARNING").upper()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        log.setLevel(level)
    except ValueError:
        log.setLevel(logging.WARNING)


def _resolve_seed(seed):
    if seed is not None:
        return int(seed)
    derived = int(np.random.SeedSequence().generate_state(1)[0])
    print(f"seed: {derived} (derived from entropy)")
    return derived


def _parse_noise(text):
    if text is None:
        return None
    if text.startswith("rel:"):
        return ("relative", float(text[4:]))
    return ("absolute", float(text))


def _parse_grid(text):
    if text is None:
        return None
    try:
        start, stop, count = text.split(":")
        return np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise CliError(f"bad --grid {text!r}; expected START:STOP:COUNT") from None


def _require_model(name):
    try:
        return dynamics.get_model(name)
    except KeyError:
        raise CliError(
            f"unknown model {name!r}; available models: {', '.join(sorted(dynamics.MODELS))}"
        ) from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    model = _require_model(args.model)
    seed = _resolve_seed(args.seed)
    ds = dynamics.generate_reference_dataset(
        model.name, seed=seed, noise_rule=_parse_noise(args.noise), t_grid=_parse_grid(args.grid)
    )
    csv_path, json_path = dynamics.save_dataset(ds, args.out, stem=model.name)
    print(f"wrote {csv_path} and {json_path}")
    noise = ", ".join(f"{n}={v:.4g}" for n, v in zip(model.state_names, ds.noise_sd_true))
    print(f"noise sd per dimension: {noise}")
    return 0


def cmd_fit_gp(args):
    ds = dynamics.load_dataset(args.data)
    seed = _resolve_seed(args.seed)
    smoothed = gp.smooth_dataset(ds, family=args.family, restarts=args.restarts, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gp.json").write_text(json.dumps(smoothed.hyperparams_json(), indent=2))
    with open(out / "smoothed.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        k = smoothed.state_dim
        writer.writerow(
            ["t"]
            + [f"xhat{i + 1}" for i in range(k)]
            + [f"vhat{i + 1}" for i in range(k)]
            + [f"vvar{i + 1}" for i in range(k)]
        )
        for j, t in enumerate(smoothed.eval_times):
            writer.writerow(
                [repr(float(t))]
                + [repr(float(v)) for v in smoothed.state_mean[:, j]]
                + [repr(float(v)) for v in smoothed.velocity_mean[:, j]]
                + [repr(float(v)) for v in smoothed.velocity_var[:, j]]
            )
    print(f"wrote {out / 'gp.json'} and {out / 'smoothed.csv'}")
    for i, rec in enumerate(smoothed.hyperparams_json()):
        print(f"dimension {i + 1}: family={rec['family']} noise_sd={rec['noise_sd']:.4f} "
              f"log_params={rec['log_params']} (fit {smoothed.fit_seconds:.2f}s)")
    return 0


def cmd_infer(args):
    model = _require_model(args.model)
    ds = dynamics.load_dataset(args.data)
    seed = _resolve_seed(args.seed)
    algorithm = METHODS[args.method]
    generations = args.generations
    if generations is None:
        kind = harness.ALGORITHMS[algorithm][0]
        generations = harness.EXPERIMENT_DEFAULTS[model.name]["generations"][kind]
    plan = harness.ExperimentPlan(
        model=model.name,
        dataset_seeds=(0,),
        algorithms=(algorithm,),
        n_particles=args.particles,
        alpha=args.alpha,
        generations={"trajectory": generations, "gradient": generations},
        gp_family=args.kernel_family,
        gp_restarts=args.restarts,
        seed=seed,
        n_jobs=args.jobs,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cell = harness.run_cell(plan, ds, algorithm)
    report = {
        "plan": plan.to_json(),
        "param_names": list(model.param_names),
        "cells": [cell.to_json(model.param_names)],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    if cell.status != "ok":
        if cell.result is not None:
            cell.result.save_populations_csv(out / "populations.csv")
        print(f"inference failed: {cell.error}", file=sys.stderr)
        return 3
    cell.result.save_populations_csv(out / "populations.csv")
    print(f"method={args.method} particles={plan.n_particles} generations={generations} "
          f"alpha={plan.alpha} seed={seed}")
    for j, name in enumerate(model.param_names):
        print(f"  {name:>6s}: {cell.summary['mean'][j]: .4f} +- {cell.summary['ci95'][j]:.4f} "
              f"(true {model.true_params[j]:g})")
    print(f"accepted/generated: {cell.accepted}/{cell.generated}  "
          f"time: {cell.total_seconds:.1f}s (gp fit {cell.gp_fit_seconds:.1f}s)  "
          f"final eps: {cell.final_epsilon:.6g}")
    return 0


def _print_experiment_table(report):
    names = dynamics.get_model(report.plan.model).param_names
    print(f"\n=== {report.plan.model}: posterior means +- ci95 ===")
    header = f"{'algorithm':>14s} {'dataset':>7s} " + " ".join(f"{n:>18s}" for n in names)
    print(header)
    for cell in report.cells:
        if cell.status != "ok":
            print(f"{cell.algorithm:>14s} {cell.dataset_seed:>7d} FAILED: {cell.error}")
            continue
        cols = " ".join(
            f"{cell.summary['mean'][j]: 9.4f}+-{cell.summary['ci95'][j]:7.4f}" for j in range(len(names))
        )
        print(f"{cell.algorithm:>14s} {cell.dataset_seed:>7d} {cols}")
    print(f"\n=== {report.plan.model}: run-time and accept/generate ===")
    for cell in report.cells:
        if cell.status != "ok":
            continue
        print(f"{cell.algorithm:>14s} {cell.dataset_seed:>7d} {cell.total_seconds:9.1f}s "
              f"{cell.accepted:>6d}/{cell.generated:<8d}")


def cmd_reproduce(args):
    if args.experiment not in EXPERIMENTS:
        raise CliError(
            f"unknown experiment {args.experiment!r}; available: {', '.join(EXPERIMENTS)}"
        )
    seed = _resolve_seed(args.seed)
    model_name = _EXPERIMENT_MODELS[args.experiment]
    variability = args.experiment.endswith("-variability")
    kw = {}
    if args.particles:
        kw["n_particles"] = args.particles
    if args.dataset_seeds:
        kw["dataset_seeds"] = tuple(int(s) for s in args.dataset_seeds.split(","))
    if variability:
        algorithms = ("GP-ABC-SMC", "GP-ABC-OLCM")
        reps = args.repetitions or 50
    else:
        algorithms = tuple(harness.ALGORITHMS) if model_name != "cascade" else ("GP-ABC-OLCM",)
        reps = args.repetitions or 1
    plan = harness.ExperimentPlan(
        model=model_name,
        algorithms=algorithms,
        repetitions=reps,
        seed=seed,
        n_jobs=args.jobs,
        **kw,
    )
    t0 = time.perf_counter()
    if variability:
        report, study = harness.variability_study(plan, out_dir=args.out)
        print(f"\n=== {args.experiment}: {study['completed_runs']} runs "
              f"({study['failed_runs']} failed), {time.perf_counter() - t0:.0f}s ===")
        for key, entry in study["cells"].items():
            print(f"--- {key}")
            for name, stats in entry.items():
                bs = stats["mean"]
                print(f"  {name:>6s} mean: median={bs['median']: .4f} "
                      f"IQR=[{bs['q1']: .4f},{bs['q3']: .4f}] "
                      f"whiskers=[{bs['whisker_lo']: .4f},{bs['whisker_hi']: .4f}] "
                      f"outliers={len(bs['outliers'])}/{bs['n']}")
    else:
        report = harness.run_experiment(plan, out_dir=args.out)
        _print_experiment_table(report)
    failed = [c for c in report.cells if c.status != "ok"]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
        return 3
    return 0


def cmd_list_models(args):
    for name in sorted(dynamics.MODELS):
        m = dynamics.MODELS[name]
        kind = "DDE" if m.is_delayed else "ODE"
        print(f"{name} ({kind}, {m.state_dim} states)")
        for pname, lo, hi, true in zip(m.param_names, m.prior_lows, m.prior_highs, m.true_params):
            print(f"  {pname:>6s} ~ U({lo:g}, {hi:g})   true {true:g}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="gpabc",
        description="ABC-SMC parameter inference for ODE/DDE models, "
        "with GP gradient-matching acceleration.",
    )
    parser.add_argument("--version", action="version", version=f"gpabc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", default=None, help="absolute sd, or rel:FRACTION")
    p.add_argument("--grid", default=None, help="START:STOP:COUNT")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-gp", help="fit per-dimension GPs and dump diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=("se", "mlp"), default="se")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_gp)

    p = sub.add_parser("infer", help="run one sampler on one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=sorted(METHODS), required=True)
    p.add_argument("--particles", type=int, default=100)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--kernel-family", choices=("se", "mlp"), default=None)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("reproduce", help="run a named benchmark experiment end to end")
    p.add_argument("--experiment", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--dataset-seeds", default=None, help="comma-separated")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("list-models", help="list registered models")
    p.set_defaults(func=cmd_list_models)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except abcsmc.GenerationCapError as exc:
        print(f"inference failed: {exc}", file=sys.stderr)
        return 3
    except gp.GPFitError as exc:
        print(f"GP fit failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
