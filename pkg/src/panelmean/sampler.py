"""Adaptive Metropolis-Hastings sampling of the (beta, rho*) posterior.

The chain starts at the MAP estimate. Until ``adapt_start`` the Gaussian
random-walk proposal uses the scaled inverse observed information at the
MAP; after that it uses the empirical covariance of the chain (Haario-style)
history, refreshed every ``adapt_interval`` iterations.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .model import ModelParams, PanelBinaryDataset, Posterior, PriorSpec, TimeGrid

log = logging.getLogger(__name__)

HAARIO_SCALE = 2.38**2
LOW_ACCEPTANCE = 0.01


class SamplerError(RuntimeError):
    """Fatal sampler failure (bad initial point, unrepairable proposal)."""


@dataclass(frozen=True)
class SamplerConfig:
    n_iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 10
    adapt_start: int = 1_000
    adapt_interval: int = 100
    proposal_scale: float | None = None  # None -> 2.38**2 / d
    jitter: float = 1e-8
    seed: int = 0
    init: ModelParams | None = None
    record_transitions: bool = False

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be positive")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("need 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.adapt_interval < 1 or self.adapt_start < 0:
            raise ValueError("bad adaptation schedule")
        if self.proposal_scale is not None and self.proposal_scale <= 0:
            raise ValueError("proposal_scale must be > 0")
        if self.jitter <= 0:
            raise ValueError("jitter must be > 0")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin

    def scale_for(self, dim: int) -> float:
        return HAARIO_SCALE / dim if self.proposal_scale is None else self.proposal_scale

    @classmethod
    def long_simulation(cls, **kw) -> "SamplerConfig":
        """50,000 iterations, 10,000 burn-in, keep every 25th."""
        return cls(n_iterations=50_000, burn_in=10_000, thin=25, **kw)

    @classmethod
    def long_application(cls, **kw) -> "SamplerConfig":
        return cls(n_iterations=60_000, burn_in=20_000, thin=25, **kw)


@dataclass
class ChainState:
    current: np.ndarray
    log_post: float
    iteration: int = 0
    accept_count: int = 0
    # running moments of the chain history, for the adaptive proposal
    n_hist: int = 0
    hist_mean: np.ndarray | None = None
    hist_scatter: np.ndarray | None = None

    def absorb(self, block: np.ndarray):
        """Merge a block of past states into the running mean/scatter."""
        nb = block.shape[0]
        if nb == 0:
            return
        bmean = block.mean(axis=0)
        c = block - bmean
        bscatter = c.T @ c
        if self.n_hist == 0:
            self.n_hist, self.hist_mean, self.hist_scatter = nb, bmean, bscatter
            return
        n = self.n_hist + nb
        delta = bmean - self.hist_mean
        self.hist_mean = self.hist_mean + delta * (nb / n)
        self.hist_scatter = self.hist_scatter + bscatter + np.outer(delta, delta) * (
            self.n_hist * nb / n
        )
        self.n_hist = n

    @property
    def history_cov(self) -> np.ndarray:
        return self.hist_scatter / (self.n_hist - 1)


@dataclass
class PosteriorSamples:
    """Retained draws; columns are ``beta_1..beta_k, rho*_1..rho*_M``."""

    draws: np.ndarray
    log_posts: np.ndarray
    k: int
    acceptance_rate: float = float("nan")
    config: SamplerConfig | None = None
    wall_time: float = 0.0
    map_estimate: np.ndarray | None = None
    transitions: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        self.log_posts = np.asarray(self.log_posts, dtype=float).ravel()
        if self.draws.shape[0] != self.log_posts.size:
            raise ValueError("draws and log_posts lengths differ")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def M(self) -> int:
        return self.draws.shape[1] - self.k

    @property
    def beta(self) -> np.ndarray:
        return self.draws[:, : self.k]

    @property
    def rho_star(self) -> np.ndarray:
        return self.draws[:, self.k :]

    def param_names(self) -> list[str]:
        return [f"beta_{j + 1}" for j in range(self.k)] + [
            f"rho_star_{m + 1}" for m in range(self.M)
        ]

    def matrix(self) -> np.ndarray:
        """Draw matrix with the log posterior as the final column."""
        return np.column_stack((self.draws, self.log_posts))


def pool(chains: list[PosteriorSamples]) -> PosteriorSamples:
    """Concatenate retained draws of several chains."""
    if not chains:
        raise ValueError("no chains to pool")
    n_acc = sum(c.acceptance_rate * (c.config.n_iterations if c.config else 1) for c in chains)
    n_tot = sum(c.config.n_iterations if c.config else 1 for c in chains)
    return PosteriorSamples(
        draws=np.vstack([c.draws for c in chains]),
        log_posts=np.concatenate([c.log_posts for c in chains]),
        k=chains[0].k,
        acceptance_rate=n_acc / n_tot,
        config=chains[0].config,
        wall_time=sum(c.wall_time for c in chains),
        map_estimate=chains[0].map_estimate,
    )


# --------------------------------------------------------------------------
# MAP and observed information


@dataclass
class MapResult:
    theta: np.ndarray
    log_post: float
    grad_norm: float
    converged: bool
    n_iter: int


def _maximize(post: Posterior, starts, max_iter: int = 5_000) -> MapResult:
    best = None
    for x0 in starts:
        x0 = np.asarray(x0, dtype=float)
        f0 = post(x0)
        if not np.isfinite(f0):
            log.debug("skipping MAP start with non-finite log posterior: %s", x0)
            continue

        def obj(th):
            v = post(th)
            return np.inf if not np.isfinite(v) else -v

        res = optimize.minimize(
            obj, x0, jac=lambda th: -post.grad(th), method="BFGS",
            options={"gtol": 1e-8, "maxiter": max_iter},
        )
        theta = res.x
        # a couple of Newton polishing steps; BFGS often stalls on precision loss
        for _ in range(3):
            try:
                H = numerical_hessian(post.grad, theta)
                step = np.linalg.solve(H, -post.grad(theta))
            except (np.linalg.LinAlgError, SamplerError):
                break
            cand = theta + step
            if np.isfinite(post(cand)) and post(cand) >= post(theta) - 1e-12:
                theta = cand
            else:
                break
        lp = post(theta)
        if not np.isfinite(lp):
            raise SamplerError(f"optimizer diverged to non-finite objective at {theta}")
        gnorm = float(np.linalg.norm(post.grad(theta)))
        r = MapResult(theta, lp, gnorm, gnorm <= 1e-5 * (1 + abs(lp)), int(res.nit))
        if best is None or r.log_post > best.log_post:
            best = r
    if best is None:
        raise SamplerError("no MAP start point has a finite log posterior")
    if not best.converged:
        log.warning("MAP search hit its limit (|grad| = %.3g)", best.grad_norm)
    return best


def find_map(
    dataset: PanelBinaryDataset | None,
    grid: TimeGrid | None,
    prior: PriorSpec,
    init: ModelParams | None = None,
) -> ModelParams:
    """Posterior mode by BFGS, started from ``init`` and from the prior mean.

    ``dataset=None`` maximizes the prior alone.
    """
    post = Posterior(dataset, grid, prior)
    starts = [prior.mean]
    if init is not None:
        starts.insert(0, init.to_vector())
    res = _maximize(post, starts)
    return ModelParams.from_vector(res.theta, prior.k)


def numerical_hessian(grad, theta, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    H = np.empty((d, d))
    for j in range(d):
        h = rel_step * max(1.0, abs(theta[j]))
        e = np.zeros(d)
        e[j] = h
        H[:, j] = (grad(theta + e) - grad(theta - e)) / (2 * h)
    if not np.all(np.isfinite(H)):
        raise SamplerError(f"non-finite second differences at {theta}")
    return 0.5 * (H + H.T)


def repair_information(info: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Symmetrize and floor eigenvalues at ``floor * max eigenvalue``."""
    info = 0.5 * (info + info.T)
    w, V = np.linalg.eigh(info)
    top = w.max()
    if top <= 0:
        raise SamplerError(f"observed information has no positive eigenvalue: {w}")
    lo = floor * top
    if w.min() >= lo:
        return info
    w = np.maximum(w, lo)
    return (V * w) @ V.T


def observed_information(
    dataset: PanelBinaryDataset | None, grid: TimeGrid | None, prior: PriorSpec, at: ModelParams
) -> np.ndarray:
    """Negative numerical Hessian of the log posterior, made positive definite."""
    post = Posterior(dataset, grid, prior)
    return repair_information(-numerical_hessian(post.grad, at.to_vector()))


def accept_probability(log_post_current: float, log_post_candidate: float) -> float:
    if log_post_candidate == -np.inf:
        return 0.0
    diff = log_post_candidate - log_post_current
    return 1.0 if diff >= 0 else float(np.exp(diff))


# --------------------------------------------------------------------------
# the chain


def _cholesky(cov: np.ndarray, jitter: float) -> np.ndarray:
    eps = jitter
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + eps * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            eps *= 100
    w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    raise SamplerError(
        f"proposal covariance not positive definite after jitter {eps:.3g}; "
        f"eigenvalues in [{w.min():.3g}, {w.max():.3g}]"
    )


def sample_posterior(post: Posterior, config: SamplerConfig) -> PosteriorSamples:
    """Run one adaptive MH chain against a prepared ``Posterior``."""
    t0 = time.perf_counter()
    d = post.dim
    rng = np.random.default_rng(config.seed)
    init = config.init.to_vector() if config.init is not None else post.prior.mean
    if not np.isfinite(post(init)):
        raise SamplerError(f"non-finite log posterior at the initial point {init}")

    mp = _maximize(post, [init] if config.init is None else [init, post.prior.mean])
    info = repair_information(-numerical_hessian(post.grad, mp.theta))
    scale = config.scale_for(d)
    chol = _cholesky(scale * np.linalg.inv(info), config.jitter)

    n_iter = config.n_iterations
    z = rng.standard_normal((n_iter, d))
    log_u = np.log(rng.random(n_iter))
    chain = np.empty((n_iter, d))
    lps = np.empty(n_iter)
    trans = None
    if config.record_transitions:
        trans = {k: np.empty(n_iter) for k in ("current", "candidate", "log_u")}
        trans["accepted"] = np.zeros(n_iter, dtype=bool)

    state = ChainState(mp.theta.copy(), mp.log_post)
    cur, lp_cur = state.current, state.log_post
    absorbed = 0
    accepted = 0
    for s in range(n_iter):
        if (
            s >= config.adapt_start
            and (s - config.adapt_start) % config.adapt_interval == 0
            and accepted > d  # history covariance is degenerate before the chain moves
        ):
            state.absorb(chain[absorbed:s])
            absorbed = s
            chol = _cholesky(scale * state.history_cov, config.jitter)
        cand = cur + chol @ z[s]
        lp_c = post(cand)
        ok = log_u[s] <= lp_c - lp_cur
        if trans is not None:
            trans["current"][s] = lp_cur
            trans["candidate"][s] = lp_c
            trans["log_u"][s] = log_u[s]
            trans["accepted"][s] = ok
        if ok:
            cur, lp_cur = cand, lp_c
            accepted += 1
        chain[s] = cur
        lps[s] = lp_cur

    state.current, state.log_post = cur, lp_cur
    if accepted / n_iter < LOW_ACCEPTANCE:
        log.warning("acceptance rate %.4f in dimension %d; the chain has barely moved "
                    "(a coarser grid via max_points usually helps)", accepted / n_iter, d)
    state.iteration, state.accept_count = n_iter, accepted
    # iteration s+1 is retained when s+1 > burn_in and (s+1 - burn_in) % thin == 0
    keep = np.arange(config.burn_in + config.thin, n_iter + 1, config.thin) - 1
    return PosteriorSamples(
        draws=chain[keep],
        log_posts=lps[keep],
        k=post.k,
        acceptance_rate=accepted / n_iter,
        config=config,
        wall_time=time.perf_counter() - t0,
        map_estimate=mp.theta,
        transitions=trans,
    )


def run_chain(
    dataset: PanelBinaryDataset | None,
    grid: TimeGrid | None,
    prior: PriorSpec,
    config: SamplerConfig,
) -> PosteriorSamples:
    return sample_posterior(Posterior(dataset, grid, prior), config)


def chain_seeds(seed: int, n_chains: int) -> list[int]:
    """Independent 64-bit seeds for ``n_chains`` chains from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_chains)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def run_chains(
    dataset: PanelBinaryDataset | None,
    grid: TimeGrid | None,
    prior: PriorSpec,
    config: SamplerConfig,
    n_chains: int,
) -> list[PosteriorSamples]:
    """Several chains with independent streams; serial and deterministic."""
    post = Posterior(dataset, grid, prior)
    return [
        sample_posterior(post, replace(config, seed=s))
        for s in chain_seeds(config.seed, n_chains)
    ]


# --------------------------------------------------------------------------
# estimators


def bayes_estimate_beta(samples: PosteriorSamples) -> np.ndarray:
    return samples.beta.mean(axis=0)


def bayes_estimate_rho(samples: PosteriorSamples) -> np.ndarray:
    """Posterior mean of ``exp(rho*)`` (not the exponential of the mean)."""
    return np.exp(samples.rho_star).mean(axis=0)


def posterior_sd(samples: PosteriorSamples) -> np.ndarray:
    if samples.n_draws < 2:
        return np.zeros(samples.draws.shape[1])
    return samples.draws.std(axis=0, ddof=1)


def estimate_baseline_mean(samples: PosteriorSamples, grid: TimeGrid, t):
    rho = bayes_estimate_rho(samples)
    if rho.size != grid.M:
        raise ValueError(f"samples have M={rho.size}, grid has M={grid.M}")
    out = grid.delta_matrix(t) @ rho
    return float(out) if np.ndim(out) == 0 else out


def estimate_mean_function(samples: PosteriorSamples, grid: TimeGrid, x, t):
    """Plug-in ``mu~0(t) * exp(beta~'x)`` at the posterior means."""
    x = np.asarray(x, dtype=float)
    return estimate_baseline_mean(samples, grid, t) * np.exp(bayes_estimate_beta(samples) @ x)


def credible_interval(samples: PosteriorSamples, coordinate: int, level: float = 0.95):
    """Equal-tailed interval with linearly interpolated order statistics."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    a = (1 - level) / 2
    lo, hi = np.quantile(samples.draws[:, coordinate], [a, 1 - a])
    return float(lo), float(hi)
