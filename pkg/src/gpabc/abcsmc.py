"""Sequential ABC sampler with pluggable simulator, perturbation kernel and
tolerance schedule.

The sampler propagates a weighted particle population through a decreasing
sequence of tolerances.  Generation 0 draws from the prior; later
generations resample from the previous population, perturb with either a
component-wise Gaussian kernel or a per-particle optimal local covariance
(OLCM) kernel, and accept candidates whose simulated data fall within the
current tolerance of the reference data.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .dynamics import IntegrationError, ModelRHSError, integrate_dde, integrate_ode

COMPONENT = "component"
OLCM = "olcm"

_LOG_2PI = np.log(2.0 * np.pi)


class SamplerError(RuntimeError):
    pass


class GenerationCapError(SamplerError):
    """A generation failed to accept enough particles within the attempt
    cap.  Carries the populations completed so far."""

    def __init__(self, message, populations):
        super().__init__(message)
        self.populations = populations


@dataclass(frozen=True)
class UniformPrior:
    """Independent uniform box prior."""

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lows", np.asarray(self.lows, dtype=float))
        object.__setattr__(self, "highs", np.asarray(self.highs, dtype=float))
        if self.lows.shape != self.highs.shape or self.lows.ndim != 1:
            raise ValueError("prior bounds must be matching 1-D arrays")
        if np.any(self.lows >= self.highs):
            raise ValueError("prior bounds must satisfy lo < hi")

    @classmethod
    def for_model(cls, model):
        return cls(lows=model.prior_lows, highs=model.prior_highs)

    @property
    def dim(self):
        return self.lows.size

    @property
    def widths(self):
        return self.highs - self.lows

    @property
    def volume(self):
        return float(np.prod(self.widths))

    def sample(self, rng):
        return rng.uniform(self.lows, self.highs)

    def contains(self, theta):
        return bool(np.all(theta >= self.lows) and np.all(theta <= self.highs))

    def pdf(self, theta):
        return 1.0 / self.volume if self.contains(theta) else 0.0


@dataclass(frozen=True)
class Particle:
    theta: np.ndarray
    weight: float
    distance: float


@dataclass(frozen=True)
class Population:
    """One sealed SMC generation."""

    index: int
    thetas: np.ndarray     # (N, d)
    weights: np.ndarray    # (N,)
    distances: np.ndarray  # (N,)
    tolerance: float
    generated_count: int
    seconds: float = 0.0

    @property
    def accepted_count(self):
        return self.thetas.shape[0]

    @property
    def particles(self):
        return [
            Particle(theta=self.thetas[i], weight=float(self.weights[i]), distance=float(self.distances[i]))
            for i in range(self.accepted_count)
        ]


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of one sampler run.

    Exactly one of ``alpha`` (adaptive quantile schedule) or ``tolerances``
    (fixed strictly-decreasing list of length n_generations + 1) must be
    given.  ``distance`` is a label recorded in reports.
    """

    n_particles: int
    n_generations: int
    alpha: float | None = 0.1
    tolerances: tuple | None = None
    kernel: str = COMPONENT
    distance: str = "trajectory"
    seed: int | None = None
    attempt_cap: int = 1_000_000
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_generations < 0:
            raise ValueError("n_generations must be >= 0")
        if self.kernel not in (COMPONENT, OLCM):
            raise ValueError(f"unknown perturbation kernel {self.kernel!r}")
        if (self.alpha is None) == (self.tolerances is None):
            raise ValueError("exactly one of alpha or tolerances must be set")
        if self.alpha is not None and not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.tolerances is not None:
            tol = tuple(float(t) for t in self.tolerances)
            if len(tol) != self.n_generations + 1:
                raise ValueError("need one tolerance per generation (n_generations + 1)")
            if any(b >= a for a, b in zip(tol, tol[1:])):
                raise ValueError("fixed tolerances must be strictly decreasing")
            object.__setattr__(self, "tolerances", tol)
        if self.attempt_cap < self.n_particles:
            raise ValueError("attempt_cap must allow at least n_particles attempts")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegrationSimulator:
    """Simulate by numerically integrating the model; integration failures
    (blowup, step-budget exhaustion on pathological parameter draws)
    surface as None and become infinite distances.

    Defaults follow the reference solver settings of the benchmark
    experiments (rtol 1e-3, atol 1e-6); the wide benchmark priors contain
    regions whose orbits would otherwise dominate the run-time."""

    model: object
    x0: np.ndarray
    t_grid: np.ndarray
    rtol: float = 1e-3
    atol: float = 1e-6
    max_steps: int = 5_000

    def __call__(self, theta):
        try:
            if self.model.is_delayed:
                traj = integrate_dde(
                    self.model, theta, self.x0, self.t_grid,
                    rtol=self.rtol, atol=self.atol, max_steps=self.max_steps,
                )
            else:
                traj = integrate_ode(
                    self.model, theta, self.x0, self.t_grid,
                    rtol=self.rtol, atol=self.atol, max_steps=self.max_steps,
                )
        except (IntegrationError, ModelRHSError):
            return None
        return traj.states


@dataclass(frozen=True)
class GradientSimulator:
    """Simulate in derivative space: evaluate the model RHS on the smoothed
    states, with the delayed state linearly interpolated from the smoothed
    trajectory (constant extension before the first sample)."""

    model: object
    times: np.ndarray
    state_mean: np.ndarray  # (K, L)

    @classmethod
    def from_smoothed(cls, smoothed, model):
        if smoothed.state_mean.shape[0] != model.state_dim:
            raise ValueError("smoothed system and model disagree on state dimension")
        return cls(model=model, times=smoothed.eval_times, state_mean=smoothed.state_mean)

    def delayed_states(self, t_d):
        query = self.times - t_d
        return np.vstack([np.interp(query, self.times, row) for row in self.state_mean])

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.model.is_delayed:
            t_d = theta[self.model.delay_param_index]
            span = self.times[-1] - self.times[0]
            if t_d > span:
                return None
            delayed = self.delayed_states(t_d)
        else:
            delayed = self.state_mean
        try:
            with np.errstate(all="ignore"):
                return self.model.rhs(self.state_mean, delayed, theta)
        except (ModelRHSError, FloatingPointError):
            return None


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------

def distance_trajectory(reference, simulated):
    """Sum of squared residuals over all dimensions and time points;
    non-finite simulations map to +inf."""
    if simulated is None:
        return np.inf
    simulated = np.asarray(simulated, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if simulated.shape != reference.shape:
        raise ValueError(f"shape mismatch: reference {reference.shape}, simulated {simulated.shape}")
    if not np.all(np.isfinite(simulated)):
        return np.inf
    diff = reference - simulated
    return float(np.sum(diff * diff))


def distance_gradient(smoothed, model, theta):
    """Gradient-matching distance: squared mismatch between the GP velocity
    field and the model RHS evaluated on the smoothed states."""
    sim = GradientSimulator.from_smoothed(smoothed, model)(theta)
    if sim is None:
        return np.inf
    return distance_trajectory(smoothed.velocity_mean, sim)


# ---------------------------------------------------------------------------
# perturbation kernels
# ---------------------------------------------------------------------------

def componentwise_variances(thetas, weights, prior_widths=None):
    """Proposal variances: twice the weighted sample variance per component,
    floored to avoid degenerate populations."""
    mean = weights @ thetas
    var = weights @ (thetas - mean) ** 2
    if prior_widths is None:
        floor_scale = np.maximum(np.abs(mean), 1.0)
    else:
        floor_scale = np.asarray(prior_widths, dtype=float)
    return np.maximum(2.0 * var, 1e-12 * floor_scale**2)


def perturb_componentwise(rng, theta_star, thetas, weights, prior_widths=None):
    """Gaussian jitter with per-component adaptive variance."""
    sigma2 = componentwise_variances(thetas, weights, prior_widths)
    return theta_star + rng.normal(0.0, np.sqrt(sigma2))


def olcm_filter(thetas, weights, distances, epsilon_next):
    """Previous-generation particles already inside the next tolerance, with
    renormalized weights.  Falls back to the full population when empty."""
    keep = distances <= epsilon_next
    if not np.any(keep):
        keep = np.ones(len(weights), dtype=bool)
    w = weights[keep]
    return thetas[keep], w / w.sum()


def olcm_covariance(theta_i, filtered_thetas, filtered_weights):
    """Optimal local covariance for one particle: weighted outer products of
    the filtered particles around theta_i, ridged to stay positive
    definite."""
    diff = filtered_thetas - theta_i
    cov = (filtered_weights[:, None] * diff).T @ diff
    d = len(theta_i)
    base = np.trace(cov) / d
    if base <= 0.0:
        base = max(float(np.mean(theta_i**2)), 1.0)
    cov[np.diag_indices_from(cov)] += 1e-8 * base
    return cov


class ComponentWiseKernel:
    """Diagonal Gaussian proposal; one shared variance vector per
    generation."""

    def __init__(self, thetas, weights, prior_widths):
        self.thetas = thetas
        self.weights = weights
        self.sigma2 = componentwise_variances(thetas, weights, prior_widths)
        self._log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * self.sigma2))

    def propose(self, rng, index):
        return self.thetas[index] + rng.normal(0.0, np.sqrt(self.sigma2))

    def log_densities(self, theta):
        """log K(theta | theta_j) for every previous particle j."""
        z2 = (theta - self.thetas) ** 2 / self.sigma2
        return self._log_norm - 0.5 * z2.sum(axis=1)


class OlcmKernel:
    """Per-particle multivariate Gaussian proposal built from the previous
    population restricted to the next tolerance."""

    def __init__(self, thetas, weights, distances, epsilon_next):
        self.thetas = thetas
        self.weights = weights
        sub_thetas, sub_weights = olcm_filter(thetas, weights, distances, epsilon_next)
        d = thetas.shape[1]
        n = thetas.shape[0]
        self.chols = np.empty((n, d, d))
        self._log_norms = np.empty(n)
        for i in range(n):
            cov = olcm_covariance(thetas[i], sub_thetas, sub_weights)
            low = np.linalg.cholesky(cov)
            self.chols[i] = low
            self._log_norms[i] = -0.5 * d * _LOG_2PI - np.sum(np.log(np.diag(low)))

    def propose(self, rng, index):
        xi = rng.normal(size=self.thetas.shape[1])
        return self.thetas[index] + self.chols[index] @ xi

    def log_densities(self, theta):
        n = self.thetas.shape[0]
        out = np.empty(n)
        for j in range(n):
            z = solve_triangular(self.chols[j], theta - self.thetas[j], lower=True)
            out[j] = self._log_norms[j] - 0.5 * z @ z
        return out


def compute_weight(theta, prior, prev_weights, kernel):
    """Importance weight pi(theta) / sum_j w_j K(theta | theta_j)."""
    log_dens = kernel.log_densities(theta)
    m = np.max(log_dens)
    if not np.isfinite(m):
        raise SamplerError("all perturbation-kernel densities vanished")
    denom = np.exp(m) * float(prev_weights @ np.exp(log_dens - m))
    if denom <= 0.0 or not np.isfinite(denom):
        raise SamplerError(f"zero or non-finite weight denominator ({denom})")
    return prior.pdf(theta) / denom


def adaptive_tolerance(prev_distances, alpha):
    """Empirical alpha-quantile (sorted linear interpolation) of the
    previous generation's accepted distances."""
    prev_distances = np.asarray(prev_distances, dtype=float)
    if prev_distances.size == 0:
        raise ValueError("need at least one distance")
    if not np.all(np.isfinite(prev_distances)):
        raise ValueError("distances must be finite")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    if np.all(prev_distances == prev_distances[0]):
        warnings.warn("tolerance schedule stalled: all distances identical", RuntimeWarning)
        return float(prev_distances[0] * (1.0 - 1e-9))
    return float(np.quantile(prev_distances, alpha, method="linear"))


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------

@dataclass
class SamplerResult:
    populations: list
    config: SamplerConfig
    seed: int
    generation_stats: list = field(default_factory=list)
    total_seconds: float = 0.0

    @property
    def final_population(self):
        return self.populations[-1]

    @property
    def total_generated(self):
        return sum(p.generated_count for p in self.populations)

    @property
    def total_accepted(self):
        return sum(p.accepted_count for p in self.populations)

    def report_dict(self):
        cfg = self.config
        return {
            "config": {
                "n_particles": cfg.n_particles,
                "n_generations": cfg.n_generations,
                "alpha": cfg.alpha,
                "tolerances": list(cfg.tolerances) if cfg.tolerances else None,
                "kernel": cfg.kernel,
                "distance": cfg.distance,
                "attempt_cap": cfg.attempt_cap,
                "n_jobs": cfg.n_jobs,
            },
            "seed": self.seed,
            "generations": self.generation_stats,
            "total_seconds": self.total_seconds,
            "accepted": self.total_accepted,
            "generated": self.total_generated,
        }

    def save_report(self, path):
        Path(path).write_text(json.dumps(self.report_dict(), indent=2))

    def save_populations_csv(self, path):
        """One row per particle: generation index, parameters, weight,
        distance."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        d = self.populations[0].thetas.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau", *[f"theta_{j + 1}" for j in range(d)], "weight", "distance"])
            for pop in self.populations:
                for i in range(pop.accepted_count):
                    writer.writerow(
                        [
                            pop.index,
                            *[repr(float(v)) for v in pop.thetas[i]],
                            repr(float(pop.weights[i])),
                            repr(float(pop.distances[i])),
                        ]
                    )
        return path


def _make_kernel(kind, prev, epsilon_next, prior):
    if kind == COMPONENT:
        return ComponentWiseKernel(prev.thetas, prev.weights, prior.widths)
    return OlcmKernel(prev.thetas, prev.weights, prev.distances, epsilon_next)


def _attempt(rng, tau, eps, prior, simulator, reference, prev, kernel):
    """One proposal -> simulate -> test attempt.  Returns (theta, distance)
    on acceptance, None otherwise."""
    if tau == 0:
        theta = prior.sample(rng)
    else:
        idx = rng.choice(prev.accepted_count, p=prev.weights)
        theta = kernel.propose(rng, idx)
        if prior.pdf(theta) == 0.0:
            return None
    dist = distance_trajectory(reference, simulator(theta))
    if np.isfinite(dist) and dist <= eps:
        return theta, dist
    return None


# worker state for parallel attempt evaluation (populated by fork/initializer)
_PAR_CTX = {}


def _par_init(ctx):
    _PAR_CTX.update(ctx)


def _par_attempt(index):
    c = _PAR_CTX
    rng = np.random.default_rng(np.random.SeedSequence([c["seed"], c["tau"], index]))
    hit = _attempt(rng, c["tau"], c["eps"], c["prior"], c["simulator"], c["reference"], c["prev"], c["kernel"])
    return (index, hit)


def run(config, prior, simulator, reference):
    """Execute the sequential ABC sampler.

    ``simulator`` maps a parameter vector to simulated data of the same
    shape as ``reference`` (or None on failure).  Returns a SamplerResult
    whose populations satisfy: normalized weights, strictly decreasing
    tolerances, all stored distances within the generation tolerance and all
    particles inside the prior support.
    """
    reference = np.asarray(reference, dtype=float)
    seed = config.seed
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1)[0])
    rng = np.random.default_rng(seed)
    n = config.n_particles
    populations = []
    stats = []
    t_start = time.perf_counter()
    prev = None
    for tau in range(config.n_generations + 1):
        gen_start = time.perf_counter()
        if config.tolerances is not None:
            eps = config.tolerances[tau]
        elif tau == 0:
            eps = np.inf
        else:
            eps = adaptive_tolerance(prev.distances, config.alpha)
            if eps >= prev.tolerance:
                # only possible when the previous tolerance was produced by
                # the stall rule; shrink deterministically
                eps = prev.tolerance * (1.0 - 1e-9)
        kernel = None if tau == 0 else _make_kernel(config.kernel, prev, eps, prior)

        thetas = np.empty((n, prior.dim))
        dists = np.empty(n)
        accepted = 0
        generated = 0
        if config.n_jobs == 1:
            while accepted < n:
                if generated >= config.attempt_cap:
                    raise GenerationCapError(
                        f"generation {tau}: {accepted}/{n} accepted after "
                        f"{generated} attempts (cap {config.attempt_cap})",
                        populations,
                    )
                generated += 1
                hit = _attempt(rng, tau, eps, prior, simulator, reference, prev, kernel)
                if hit is not None:
                    thetas[accepted], dists[accepted] = hit
                    accepted += 1
        else:
            generated = _parallel_generation(
                config, seed, tau, eps, prior, simulator, reference, prev, kernel, thetas, dists, populations
            )

        if tau == 0:
            weights = np.full(n, 1.0 / n)
        else:
            raw = np.array(
                [compute_weight(thetas[i], prior, prev.weights, kernel) for i in range(n)]
            )
            weights = raw / raw.sum()
        pop = Population(
            index=tau,
            thetas=thetas,
            weights=weights,
            distances=dists,
            tolerance=float(eps),
            generated_count=generated,
            seconds=time.perf_counter() - gen_start,
        )
        populations.append(pop)
        stats.append(
            {
                "tau": tau,
                "epsilon": float(eps),
                "accepted": n,
                "generated": generated,
                "seconds": pop.seconds,
            }
        )
        prev = pop
    return SamplerResult(
        populations=populations,
        config=config,
        seed=seed,
        generation_stats=stats,
        total_seconds=time.perf_counter() - t_start,
    )


def _parallel_generation(config, seed, tau, eps, prior, simulator, reference, prev, kernel, thetas, dists, populations):
    """Evaluate attempts in waves on a process pool.  Each attempt index
    owns a counter-derived random stream, so the accepted set is
    reproducible for a given (seed, index) regardless of worker count."""
    n = config.n_particles
    ctx = {
        "seed": seed,
        "tau": tau,
        "eps": eps,
        "prior": prior,
        "simulator": simulator,
        "reference": reference,
        "prev": prev,
        "kernel": kernel,
    }
    wave = max(4 * n, 64 * config.n_jobs)
    accepted_hits = []
    next_index = 0
    with multiprocessing.Pool(config.n_jobs, initializer=_par_init, initargs=(ctx,)) as pool:
        while True:
            if next_index >= config.attempt_cap:
                raise GenerationCapError(
                    f"generation {tau}: {len(accepted_hits)}/{n} accepted after "
                    f"{next_index} attempts (cap {config.attempt_cap})",
                    populations,
                )
            indices = range(next_index, min(next_index + wave, config.attempt_cap))
            next_index = indices.stop
            for index, hit in pool.map(_par_attempt, indices, chunksize=16):
                if hit is not None:
                    accepted_hits.append((index, hit))
            if len(accepted_hits) >= n:
                break
    accepted_hits.sort(key=lambda pair: pair[0])
    for i, (_, hit) in enumerate(accepted_hits[:n]):
        thetas[i], dists[i] = hit
    # attempts made: everything up to and including the Nth acceptance
    return accepted_hits[n - 1][0] + 1
