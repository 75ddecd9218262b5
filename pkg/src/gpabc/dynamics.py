"""Benchmark dynamical systems, integrators and synthetic data generation.

Three code-registered models: the Lotka-Volterra predator-prey ODE, the Hes1
transcriptional oscillator (a DDE with one delayed variable) and a
five-state signal transduction cascade.  Right-hand sides broadcast over
trailing axes, so they evaluate equally on a single state vector or on a
whole (K, L) trajectory at once.
"""

from __future__ import annotations

import bisect
import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_RTOL = 1e-6
DEFAULT_ATOL = 1e-8

HES1_HILL_COEFF = 5.0  # fixed model constant, not inferred


class IntegrationError(RuntimeError):
    """Integration failure signal (step-size underflow, blowup, step budget
    exhausted).  Samplers treat this as a rejection, not a crash."""


class ModelRHSError(ValueError):
    """A right-hand side could not be evaluated (e.g. division by zero)."""


@dataclass(frozen=True)
class ModelSpec:
    """A dynamical system: state/parameter dimensions, RHS, priors and the
    reference configuration used to generate synthetic data."""

    name: str
    state_dim: int
    param_dim: int
    rhs: callable
    prior_lows: np.ndarray
    prior_highs: np.ndarray
    true_params: np.ndarray
    initial_state: np.ndarray
    param_names: tuple
    state_names: tuple
    is_delayed: bool = False
    delay_param_index: int | None = None

    def __post_init__(self):
        if np.any(self.prior_lows >= self.prior_highs):
            raise ValueError(f"model {self.name}: prior bounds must satisfy lo < hi")


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (K, L)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")


@dataclass(frozen=True)
class TimeSeriesDataset:
    times: np.ndarray
    observations: np.ndarray  # (K, L)
    noise_sd_true: np.ndarray | None = None
    provenance: dict | None = None

    def __post_init__(self):
        if self.observations.shape[1] != self.times.size:
            raise ValueError("observations must have one column per time point")

    @property
    def state_dim(self):
        return self.observations.shape[0]


# ---------------------------------------------------------------------------
# model right-hand sides
# ---------------------------------------------------------------------------

def lotka_volterra_rhs(state, delayed_state, params):
    x, y = state[0], state[1]
    a, b = params[0], params[1]
    return np.stack([a * x - x * y, b * x * y - y])


def hes1_rhs(state, delayed_state, params):
    mu, p = state[0], state[1]
    p_delayed = delayed_state[1]
    mu_m, mu_p, p0 = params[0], params[1], params[2]
    hill = 1.0 / (1.0 + (p_delayed / p0) ** HES1_HILL_COEFF)
    return np.stack([hill - mu_m * mu, mu - mu_p * p])


def cascade_rhs(state, delayed_state, params):
    s, _sd, r, rs, rpp = state
    k1, k2, k3, k4, v, km = params
    denom = km + rpp
    if np.any(denom == 0.0):
        raise ModelRHSError(
            f"signal transduction RHS: K_m + [Rpp] = 0 (params={np.asarray(params).tolist()})"
        )
    flux = v * rpp / denom
    return np.stack(
        [
            -k1 * s - k2 * s * r + k3 * rs,
            k1 * s,
            -k2 * s * r + k3 * rs + flux,
            k2 * s * r - k3 * rs - k4 * rs,
            k4 * rs - flux,
        ]
    )


LOTKA_VOLTERRA = ModelSpec(
    name="lotka-volterra",
    state_dim=2,
    param_dim=2,
    rhs=lotka_volterra_rhs,
    prior_lows=np.array([-10.0, -10.0]),
    prior_highs=np.array([10.0, 10.0]),
    true_params=np.array([1.0, 1.0]),
    initial_state=np.array([1.0, 0.5]),
    param_names=("alpha", "beta"),
    state_names=("x", "y"),
)

HES1 = ModelSpec(
    name="hes1",
    state_dim=2,
    param_dim=4,
    rhs=hes1_rhs,
    prior_lows=np.array([-2.0, -2.0, 0.0, 0.0]),
    prior_highs=np.array([2.0, 2.0, 200.0, 50.0]),
    true_params=np.array([0.03, 0.03, 100.0, 25.0]),
    initial_state=np.array([3.0, 3.0]),
    param_names=("mu_m", "mu_p", "p0", "t_d"),
    state_names=("mu", "p"),
    is_delayed=True,
    delay_param_index=3,
)

CASCADE = ModelSpec(
    name="cascade",
    state_dim=5,
    param_dim=6,
    rhs=cascade_rhs,
    prior_lows=np.array([0.05, 0.4, 0.03, 0.1, 0.015, 0.1]),
    prior_highs=np.array([0.09, 0.8, 0.07, 0.5, 0.0195, 0.5]),
    true_params=np.array([0.07, 0.6, 0.05, 0.3, 0.017, 0.3]),
    initial_state=np.array([1.0, 0.0, 1.0, 0.0, 0.0]),
    param_names=("k1", "k2", "k3", "k4", "V", "k_m"),
    state_names=("S", "S_d", "R", "RS", "R_pp"),
)

MODELS = {m.name: m for m in (LOTKA_VOLTERRA, HES1, CASCADE)}


def get_model(name):
    try:
        return MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {sorted(MODELS)}") from None


def rhs_eval(model, state, delayed_state, params):
    """Evaluate the model RHS, checking dimensions."""
    state = np.asarray(state, dtype=float)
    delayed_state = np.asarray(delayed_state, dtype=float)
    params = np.asarray(params, dtype=float)
    if state.shape[0] != model.state_dim or delayed_state.shape != state.shape:
        raise ValueError(f"state must have leading dimension {model.state_dim}")
    if params.shape != (model.param_dim,):
        raise ValueError(f"params must have shape ({model.param_dim},)")
    return model.rhs(state, delayed_state, params)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) with cubic Hermite dense output
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = (
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
)
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_MAX_SCALE = 1e8  # state magnitude treated as blowup


def _hermite(t, t0, h, y0, y1, f0, f1):
    """Cubic Hermite interpolant matching values and derivatives at both
    step endpoints."""
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


class _StepBudget:
    def __init__(self, max_steps):
        self.remaining = max_steps

    def spend(self):
        self.remaining -= 1
        if self.remaining < 0:
            raise IntegrationError("step budget exhausted")


def _advance(rhs, t0, t_end, y0, rtol, atol, budget, on_step, f0=None):
    """Adaptively integrate rhs(t, y) from t0 to t_end, invoking
    ``on_step(t0, h, y0, y1, f0, f1)`` after every accepted step."""
    span = t_end - t0
    if span <= 0:
        return y0, f0
    t, y = t0, np.asarray(y0, dtype=float)
    f = rhs(t, y) if f0 is None else f0
    if not np.all(np.isfinite(f)):
        raise IntegrationError(f"non-finite RHS at start (t={t})")
    h = span / 100.0
    h_min = 1e-12 * max(span, abs(t_end), 1.0)
    stages = np.empty((7, y.size))
    while t < t_end:
        budget.spend()
        h = min(h, t_end - t)
        stages[0] = f
        failed = False
        for i in range(1, 7):
            yi = y + h * (_DP_A[i] @ stages[:i])
            stages[i] = rhs(t + _DP_C[i] * h, yi)
            if not np.all(np.isfinite(stages[i])):
                failed = True
                break
        if not failed:
            y_new = y + h * (_DP_B @ stages)
            err_vec = h * (_DP_E @ stages)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = np.sqrt(np.mean((err_vec / scale) ** 2))
            failed = not (np.isfinite(err) and np.all(np.isfinite(y_new)))
        if failed or err > 1.0:
            h *= 0.5 if failed else max(0.2, 0.9 * err**-0.25)
            if h < h_min:
                raise IntegrationError(f"step size underflow at t={t:g}")
            continue
        # FSAL: last stage is rhs(t + h, y_new); copy it out of the stage
        # buffer, which is overwritten on the next step
        f_new = stages[6].copy()
        on_step(t, h, y, y_new, f, f_new)
        t, y, f = t + h, y_new, f_new
        if np.max(np.abs(y)) > _MAX_SCALE:
            raise IntegrationError(f"state blowup at t={t:g}")
        h *= min(5.0, max(0.2, 0.9 * (err + 1e-16) ** -0.2))
    return y, f


class _GridSampler:
    """Collects dense-output samples for a sorted time grid while steps
    stream in."""

    def __init__(self, t_grid, y_start):
        self.t_grid = t_grid
        self.samples = np.empty((y_start.size, t_grid.size))
        self.samples[:, 0] = y_start
        self.cursor = 1

    def on_step(self, t0, h, y0, y1, f0, f1):
        t1 = t0 + h
        while self.cursor < self.t_grid.size and self.t_grid[self.cursor] <= t1 + 1e-12 * max(abs(t1), 1.0):
            tq = self.t_grid[self.cursor]
            self.samples[:, self.cursor] = _hermite(tq, t0, h, y0, y1, f0, f1)
            self.cursor += 1

    def finish(self, t_end, y_end):
        while self.cursor < self.t_grid.size:
            if self.t_grid[self.cursor] > t_end + 1e-9 * max(abs(t_end), 1.0):
                raise IntegrationError("grid extends past integration end")
            self.samples[:, self.cursor] = y_end
            self.cursor += 1
        return self.samples


def _check_grid(t_grid):
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 2:
        raise ValueError("t_grid must be a 1-D grid with at least two points")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    return t_grid


def integrate_ode(model, params, x0, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, max_steps=100_000):
    """Integrate a non-delayed model over ``t_grid`` with an adaptive
    Dormand-Prince 5(4) pair; grid values come from the cubic Hermite dense
    output."""
    if model.is_delayed:
        raise ValueError(f"model {model.name} is delayed; use integrate_dde")
    t_grid = _check_grid(t_grid)
    params = np.asarray(params, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    def rhs(t, y):
        with np.errstate(all="ignore"):
            return model.rhs(y, y, params)

    sampler = _GridSampler(t_grid, x0)
    budget = _StepBudget(max_steps)
    y_end, _ = _advance(rhs, t_grid[0], t_grid[-1], x0, rtol, atol, budget, sampler.on_step)
    return Trajectory(times=t_grid, states=sampler.finish(t_grid[-1], y_end))


class _DelayedEvaluator:
    """Piecewise cubic-Hermite record of the computed solution, with a
    constant pre-history."""

    def __init__(self, t_start, history_value):
        self.t_start = t_start
        self.history_value = np.asarray(history_value, dtype=float)
        self.lefts = []
        self.segments = []

    def add(self, t0, h, y0, y1, f0, f1):
        self.lefts.append(t0)
        self.segments.append((t0, h, y0, y1, f0, f1))

    def __call__(self, t):
        if t <= self.t_start:
            return self.history_value
        if not self.segments:
            raise RuntimeError("delayed-state query before any computed segment")
        idx = bisect.bisect_right(self.lefts, t) - 1
        t0, h, y0, y1, f0, f1 = self.segments[idx]
        if t > t0 + h + 1e-9 * max(abs(t), 1.0):
            raise RuntimeError(f"delayed-state query at t={t:g} past computed solution")
        return _hermite(min(t, t0 + h), t0, h, y0, y1, f0, f1)


def integrate_dde(model, params, history_value, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, max_steps=500_000):
    """Integrate a delayed model by the method of steps.

    The delay is read from ``params`` at the model's delay index and must be
    positive.  The state before the first grid point is the constant
    ``history_value``; the delayed state inside the integrated range is
    evaluated from the stored dense output.
    """
    if not model.is_delayed:
        raise ValueError(f"model {model.name} is not delayed; use integrate_ode")
    t_grid = _check_grid(t_grid)
    params = np.asarray(params, dtype=float)
    t_d = float(params[model.delay_param_index])
    if not (np.isfinite(t_d) and t_d > 0):
        raise IntegrationError(f"delay must be positive, got {t_d}")

    history = _DelayedEvaluator(t_grid[0], history_value)

    def rhs(t, y):
        with np.errstate(all="ignore"):
            return model.rhs(y, history(t - t_d), params)

    def on_step(t0, h, y0, y1, f0, f1):
        history.add(t0, h, y0, y1, f0, f1)
        sampler.on_step(t0, h, y0, y1, f0, f1)

    x0 = np.asarray(history_value, dtype=float)
    sampler = _GridSampler(t_grid, x0)
    budget = _StepBudget(max_steps)
    y, f = x0, None
    t_end = t_grid[-1]
    span = t_end - t_grid[0]
    if span / t_d > max_steps:
        raise IntegrationError(
            f"delay {t_d:g} requires more than {max_steps} intervals over span {span:g}"
        )
    # integrate interval by interval so steps never straddle the breakpoints
    # at multiples of the delay, where smoothness of the delayed term breaks
    edges = np.arange(t_grid[0], t_end, t_d)
    edges = np.append(edges, t_end)
    for left, right in zip(edges[:-1], edges[1:]):
        y, f = _advance(rhs, left, right, y, rtol, atol, budget, on_step, f0=None)
    return Trajectory(times=t_grid, states=sampler.finish(t_end, y))


def integrate(model, params, x0_or_history, t_grid, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    if model.is_delayed:
        return integrate_dde(model, params, x0_or_history, t_grid, rtol=rtol, atol=atol)
    return integrate_ode(model, params, x0_or_history, t_grid, rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def generate_dataset(model, params, x0, t_grid, noise_rule, seed):
    """Integrate the model and add i.i.d. Gaussian noise per dimension.

    ``noise_rule`` is ``("absolute", sd)`` with a scalar or per-dimension
    standard deviation, or ``("relative", fraction)`` where the noise sd of
    each dimension is ``fraction`` times the empirical standard deviation of
    its noiseless trajectory samples.
    """
    kind, value = noise_rule
    traj = integrate(model, params, x0, t_grid)
    if kind == "absolute":
        sd = np.broadcast_to(np.asarray(value, dtype=float), (model.state_dim,)).copy()
    elif kind == "relative":
        sd = float(value) * np.std(traj.states, axis=1, ddof=1)
    else:
        raise ValueError(f"unknown noise rule {kind!r}")
    rng = np.random.default_rng(seed)
    obs = traj.states + rng.normal(0.0, sd[:, None], size=traj.states.shape)
    return TimeSeriesDataset(
        times=traj.times,
        observations=obs,
        noise_sd_true=sd,
        provenance={
            "model": model.name,
            "params": np.asarray(params, dtype=float).tolist(),
            "seed": seed,
            "noise_rule": [kind, value if np.isscalar(value) else list(value)],
            "x0": np.asarray(x0, dtype=float).tolist(),
        },
    )


# §VI generation protocols: grid, noise rule, initial state come from the
# reference experiments for each model.
DATASET_PROTOCOLS = {
    "lotka-volterra": {
        "t_grid": np.linspace(0.0, 10.0, 11),
        "noise_rule": ("absolute", 0.5),
    },
    "hes1": {
        "t_grid": np.linspace(0.0, 300.0, 151),
        "noise_rule": ("relative", 0.1),
    },
    "cascade": {
        "t_grid": np.array([0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100], dtype=float),
        "noise_rule": ("absolute", 0.1),
    },
}


def generate_reference_dataset(model_name, seed, noise_rule=None, t_grid=None):
    """Generate a dataset with the benchmark protocol for a named model."""
    model = get_model(model_name)
    proto = DATASET_PROTOCOLS[model_name]
    return generate_dataset(
        model,
        model.true_params,
        model.initial_state,
        proto["t_grid"] if t_grid is None else t_grid,
        noise_rule or proto["noise_rule"],
        seed,
    )


# ---------------------------------------------------------------------------
# persistence: CSV data + JSON provenance sidecar
# ---------------------------------------------------------------------------

def save_dataset(dataset, out_dir, stem="dataset"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    k = dataset.observations.shape[0]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *[f"x{i + 1}" for i in range(k)]])
        for j, t in enumerate(dataset.times):
            writer.writerow([repr(float(t)), *[repr(float(v)) for v in dataset.observations[:, j]]])
    sidecar = {
        "provenance": dataset.provenance,
        "noise_sd_true": None
        if dataset.noise_sd_true is None
        else [float(v) for v in dataset.noise_sd_true],
    }
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(sidecar, indent=2))
    return csv_path, json_path


def load_dataset(csv_path):
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in row] for row in body])
    times, obs = data[:, 0], data[:, 1:].T
    sidecar = csv_path.with_suffix(".json")
    noise_sd, provenance = None, None
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        provenance = meta.get("provenance")
        if meta.get("noise_sd_true") is not None:
            noise_sd = np.array(meta["noise_sd_true"])
    if len(header) != obs.shape[0] + 1:
        raise ValueError("malformed dataset CSV")
    return TimeSeriesDataset(
        times=times, observations=obs, noise_sd_true=noise_sd, provenance=provenance
    )
