"""Synthetic panel binary data and the replication study.

Events follow a (possibly mixed) Poisson process with mean
``t**exponent * exp(omega + beta'x)``; ``x = (Bernoulli(0.5), Uniform(0, 1))``.
Each subject is seen at ``V ~ U{1..6}`` times, either a subset of the lattice
``{0.1, ..., 1.0}`` (``FIXED_GRID``) or iid uniform draws (``UNIFORM_TIMES``).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .model import (
    PanelBinaryDataset,
    Posterior,
    PriorSpec,
    SubjectRecord,
    TimeGrid,
    build_time_grid,
)
from .sampler import (
    SamplerConfig,
    SamplerError,
    bayes_estimate_beta,
    credible_interval,
    estimate_baseline_mean,
    posterior_sd,
    sample_posterior,
)

log = logging.getLogger(__name__)

FIXED_GRID = "fixed"
UNIFORM_TIMES = "uniform"
LATTICE = np.round(np.arange(1, 11) / 10, 10)
MAX_VISITS = 6


@dataclass(frozen=True)
class ScenarioSpec:
    n: int = 100
    beta_true: tuple = (0.9, 1.2)
    baseline_exponent: float = 0.9
    scenario: str = FIXED_GRID
    mixed: bool = False
    omega_sd: float = 0.2
    replications: int = 100
    seed: int = 2024
    prior_var: float = 100.0
    beta_prior_mean: tuple = (1.0, 1.0)
    # coarsen the grid to at most this many cells; None keeps every distinct time
    max_points: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.replications < 1:
            raise ValueError("n and replications must be >= 1")
        if self.max_points is not None and self.max_points < 1:
            raise ValueError("max_points must be >= 1")
        if self.omega_sd < 0:
            raise ValueError("omega_sd must be >= 0")
        if self.scenario not in (FIXED_GRID, UNIFORM_TIMES):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if len(self.beta_true) != 2:
            raise ValueError("the simulation design has two covariates")

    def true_baseline(self, t):
        return np.asarray(t, dtype=float) ** self.baseline_exponent


def gen_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    """``(n, 2)`` array: column 0 is Bernoulli(0.5), column 1 Uniform(0, 1)."""
    x1 = (rng.random(n) < 0.5).astype(float)
    x2 = rng.random(n)
    return np.column_stack((x1, x2))


def gen_observation_times(rng: np.random.Generator, scenario: str) -> np.ndarray:
    v = int(rng.integers(1, MAX_VISITS + 1))
    if scenario == FIXED_GRID:
        # without replacement: repeated lattice points would give empty windows
        return np.sort(rng.choice(LATTICE, size=v, replace=False))
    if scenario == UNIFORM_TIMES:
        while True:
            t = np.sort(rng.random(v))
            if t[0] > 0 and np.all(np.diff(t) > 0):
                return t
    raise ValueError(f"unknown scenario {scenario!r}")


def gen_panel_indicators(
    rng: np.random.Generator, times, x, beta_true, exponent: float = 0.9, omega: float = 0.0
) -> np.ndarray:
    """``B_j = 1{N(U_j) - N(U_{j-1}) > 0}`` under the Poisson model."""
    counts = gen_panel_counts(rng, times, x, beta_true, exponent, omega)
    return counts > 0


def gen_panel_counts(rng, times, x, beta_true, exponent=0.9, omega=0.0) -> np.ndarray:
    t = np.concatenate(([0.0], np.asarray(times, dtype=float)))
    dmu = np.diff(t**exponent) * np.exp(omega + np.dot(beta_true, x))
    return rng.poisson(dmu)


def generate_dataset(spec: ScenarioSpec, rng: np.random.Generator) -> PanelBinaryDataset:
    X = gen_covariates(rng, spec.n)
    subjects = []
    for i in range(spec.n):
        times = gen_observation_times(rng, spec.scenario)
        omega = rng.normal(0.0, spec.omega_sd) if spec.mixed else 0.0
        b = gen_panel_indicators(rng, times, X[i], spec.beta_true, spec.baseline_exponent, omega)
        subjects.append(SubjectRecord(i + 1, times, b, X[i]))
    return PanelBinaryDataset(tuple(subjects), ("x1", "x2"))


def true_log_rates(grid: TimeGrid, exponent: float) -> np.ndarray:
    """``log`` of the average true rate over each grid cell."""
    e = grid.edges
    return np.log(np.diff(e**exponent) / np.diff(e))


def elicit_prior(spec: ScenarioSpec, grid: TimeGrid) -> PriorSpec:
    """rho* prior centred at the true cell rates; beta ~ N((1, 1), 100 I)."""
    return PriorSpec(
        beta_mean=np.asarray(spec.beta_prior_mean, dtype=float),
        beta_var=np.full(2, spec.prior_var),
        rho_star_mean=true_log_rates(grid, spec.baseline_exponent),
        rho_star_var=np.full(grid.M, spec.prior_var),
    )


# --------------------------------------------------------------------------
# replication study


@dataclass
class ReplicateResult:
    index: int
    estimate: np.ndarray
    sd: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    grid_times: np.ndarray
    baseline_estimate: np.ndarray
    acceptance_rate: float

    def covers(self, truth) -> np.ndarray:
        truth = np.asarray(truth)
        return (self.ci_low <= truth) & (truth <= self.ci_high)


@dataclass
class ReplicationSummary:
    beta_true: np.ndarray
    mean: np.ndarray
    abs_bias: np.ndarray
    esd: np.ndarray
    sse: np.ndarray
    cp: np.ndarray
    mean_mse_baseline: float
    n_ok: int
    n_failed: int
    replicates: list = field(default_factory=list, repr=False)

    def table_rows(self):
        """One row per coefficient, Table-1 column order."""
        for j, b in enumerate(self.beta_true):
            yield {
                "parameter": f"beta_{j + 1}",
                "true": float(b),
                "mean": float(self.mean[j]),
                "abs_bias": float(self.abs_bias[j]),
                "esd": float(self.esd[j]),
                "sse": float(self.sse[j]),
                "cp": float(self.cp[j]),
            }


def replicate_seeds(seed: int, replications: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(replications)


def run_replicate(spec: ScenarioSpec, sampler_config: SamplerConfig, index: int,
                  seq: np.random.SeedSequence) -> ReplicateResult:
    data_seq, chain_seq = seq.spawn(2)
    rng = np.random.default_rng(data_seq)
    data = generate_dataset(spec, rng)
    grid = build_time_grid(data, spec.max_points)
    prior = elicit_prior(spec, grid)
    cfg = replace(sampler_config, seed=int(chain_seq.generate_state(1, dtype=np.uint64)[0]))
    samples = sample_posterior(Posterior(data, grid, prior), cfg)
    lo, hi = zip(*(credible_interval(samples, j, 0.95) for j in range(2)))
    return ReplicateResult(
        index=index,
        estimate=bayes_estimate_beta(samples),
        sd=posterior_sd(samples)[:2],
        ci_low=np.array(lo),
        ci_high=np.array(hi),
        grid_times=grid.points,
        baseline_estimate=estimate_baseline_mean(samples, grid, grid.points),
        acceptance_rate=samples.acceptance_rate,
    )


def _run_one(args):
    spec, cfg, i, seq = args
    try:
        return run_replicate(spec, cfg, i, seq)
    except (SamplerError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("replicate %d failed: %s", i, exc)
        return i


def mean_mse_baseline(per_replicate_estimates, true_baseline, grid_times) -> float:
    """Average over monitoring times of the across-replicate MSE of mu~0.

    ``per_replicate_estimates[r]`` holds the estimates at ``grid_times[r]``;
    ``true_baseline`` is a callable.  With a common grid this is exactly the
    mean over times of the per-time MSE; with replicate-specific grids each
    replicate's squared errors are averaged over its own times first.
    """
    errs = [
        np.mean((np.asarray(est) - true_baseline(np.asarray(t))) ** 2)
        for est, t in zip(per_replicate_estimates, grid_times)
    ]
    if not errs:
        raise ValueError("no replicates")
    return float(np.mean(errs))


def summarize(spec: ScenarioSpec, results: list[ReplicateResult], n_failed: int = 0) -> ReplicationSummary:
    truth = np.asarray(spec.beta_true, dtype=float)
    est = np.array([r.estimate for r in results])
    sds = np.array([r.sd for r in results])
    cov = np.array([r.covers(truth) for r in results])
    mean = est.mean(axis=0)
    return ReplicationSummary(
        beta_true=truth,
        mean=mean,
        abs_bias=np.abs(mean - truth),
        esd=sds.mean(axis=0),
        sse=est.std(axis=0, ddof=1) if len(results) > 1 else np.zeros(2),
        cp=cov.mean(axis=0),
        mean_mse_baseline=mean_mse_baseline(
            [r.baseline_estimate for r in results], spec.true_baseline,
            [r.grid_times for r in results],
        ),
        n_ok=len(results),
        n_failed=n_failed,
        replicates=results,
    )


def run_replication_study(
    spec: ScenarioSpec, sampler_config: SamplerConfig, workers: int = 1
) -> ReplicationSummary:
    """Generate, fit and summarize ``spec.replications`` independent datasets.

    Replicates whose sampler fails are dropped and counted; more than 5%
    failures aborts the study.  Results do not depend on ``workers``.
    """
    seqs = replicate_seeds(spec.seed, spec.replications)
    jobs = [(spec, sampler_config, i, s) for i, s in enumerate(seqs)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        out = [_run_one(j) for j in jobs]
    ok = [r for r in out if isinstance(r, ReplicateResult)]
    failed = len(out) - len(ok)
    if failed > 0.05 * spec.replications:
        raise RuntimeError(f"{failed} of {spec.replications} replicates failed")
    return summarize(spec, ok, failed)


def spec_dict(spec: ScenarioSpec) -> dict:
    return asdict(spec)


# --------------------------------------------------------------------------
# HRS-like preset: biennial waves, six binary baseline conditions

HRS_COVARIATES = ("RAGENDER", "R8HIBPE", "R8DIABE", "R8PSYCHE", "R8HEARTE", "R8ARTHRE")
HRS_BETA = (-0.1179, 0.1214, 0.1453, 0.1859, 0.1289, 0.1512)
HRS_WAVE_TIMES = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0)
HRS_WAVE_PROPORTIONS = (0.944, 0.822, 0.714, 0.638, 0.524, 0.406)
# covariate prevalences are not published; plausible values for adults aged 60-90
HRS_PREVALENCE = (0.42, 0.60, 0.20, 0.15, 0.30, 0.60)


@dataclass(frozen=True)
class HRSLikeSpec:
    n: int = 500
    beta_true: tuple = HRS_BETA
    prevalence: tuple = HRS_PREVALENCE
    wave_times: tuple = HRS_WAVE_TIMES
    wave_proportions: tuple = HRS_WAVE_PROPORTIONS
    attendance: float = 1.0
    seed: int = 190811

    def __post_init__(self):
        if not (len(self.beta_true) == len(self.prevalence)):
            raise ValueError("beta_true and prevalence lengths differ")
        if len(self.wave_times) != len(self.wave_proportions):
            raise ValueError("wave_times and wave_proportions lengths differ")
        if not 0 < self.attendance <= 1:
            raise ValueError("attendance must lie in (0, 1]")


def _covariate_mixture(beta, prevalence):
    """All binary covariate patterns with their probabilities and risk scores."""
    k = len(beta)
    pats = (np.arange(2**k)[:, None] >> np.arange(k)) & 1
    p = np.asarray(prevalence)
    prob = np.prod(np.where(pats == 1, p, 1 - p), axis=1)
    return prob, np.exp(pats @ np.asarray(beta))


def hrs_baseline_increments(spec: HRSLikeSpec) -> np.ndarray:
    """Baseline mean increment per wave matching the any-visit proportions.

    Solves ``E_x[1 - exp(-d_w exp(beta'x))] = p_w`` exactly over the discrete
    covariate distribution.
    """
    from scipy.optimize import brentq

    prob, risk = _covariate_mixture(spec.beta_true, spec.prevalence)

    def gap(d, target):
        return prob @ (-np.expm1(-d * risk)) - target

    return np.array([brentq(gap, 1e-12, 1e3, args=(p,), xtol=1e-14)
                     for p in spec.wave_proportions])


def hrs_true_baseline(spec: HRSLikeSpec, t):
    inc = hrs_baseline_increments(spec)
    grid = TimeGrid(np.asarray(spec.wave_times))
    return grid.delta_matrix(t) @ (inc / grid.widths)


def generate_hrs_like(spec: HRSLikeSpec, rng: np.random.Generator | None = None) -> PanelBinaryDataset:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    k = len(spec.beta_true)
    inc = hrs_baseline_increments(spec)
    waves = np.asarray(spec.wave_times)
    cumulative = np.concatenate(([0.0], np.cumsum(inc)))
    subjects = []
    for i in range(spec.n):
        x = (rng.random(k) < np.asarray(spec.prevalence)).astype(float)
        seen = rng.random(waves.size) < spec.attendance
        if not seen.any():
            seen[rng.integers(waves.size)] = True
        idx = np.flatnonzero(seen)
        mu = cumulative[np.concatenate(([0], idx + 1))]
        b = rng.poisson(np.diff(mu) * np.exp(x @ np.asarray(spec.beta_true))) > 0
        subjects.append(SubjectRecord(f"S{i + 1:04d}", waves[idx], b, x))
    return PanelBinaryDataset(tuple(subjects), HRS_COVARIATES)
