"""Model comparison, case-deletion influence and MCMC convergence diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .model import Design, ModelParams, PanelBinaryDataset, SubjectRecord, TimeGrid
from .sampler import PosteriorSamples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DivergenceKind:
    """A convex ``phi`` with ``phi(1) = 0``, written in terms of ``log y``."""

    tag: str
    phi_log: Callable[[np.ndarray], np.ndarray]
    threshold: float

    def phi(self, y):
        with np.errstate(divide="ignore"):
            return self.phi_log(np.log(np.asarray(y, dtype=float)))


def _kl(ly):
    return -ly


def _j(ly):
    return np.expm1(ly) * ly


def _l1(ly):
    return 0.5 * np.abs(np.expm1(ly))


def _chisq(ly):
    # y (1/y - 1)^2 = (1 - y)^2 / y
    return np.expm1(ly) ** 2 * np.exp(-ly)


KL = DivergenceKind("KL", _kl, 0.223)
J = DivergenceKind("J", _j, 0.416)
L1 = DivergenceKind("L1", _l1, 0.3)
CHISQ = DivergenceKind("ChiSq", _chisq, 0.562)
DIVERGENCES = {d.tag: d for d in (KL, J, L1, CHISQ)}


def _dataset_of(subject: SubjectRecord) -> PanelBinaryDataset:
    return PanelBinaryDataset((subject,))


def subject_likelihood(params: ModelParams, grid: TimeGrid, subject: SubjectRecord) -> float:
    """``P(D_i | beta, rho*)``, the product over the subject's windows."""
    d = Design.build(_dataset_of(subject), grid)
    return float(np.exp(d.log_lik(params.to_vector())))


def deviance(params: ModelParams, dataset: PanelBinaryDataset, grid: TimeGrid) -> float:
    """``-2 * log-likelihood``, summed subject by subject as in :func:`dic`."""
    d = Design.build(dataset, grid)
    return float(-2.0 * d.subject_log_lik(params.to_vector()[None, :]).sum(axis=0)[0])


def dic(samples: PosteriorSamples, dataset: PanelBinaryDataset, grid: TimeGrid) -> float:
    """``2 * mean deviance - deviance at the posterior means of (beta, rho*)``."""
    design = Design.build(dataset, grid)
    ll = subject_log_lik_matrix(samples, dataset, grid, design=design)
    return _dic_from_matrix(ll, samples, design)


def _dic_from_matrix(ll: np.ndarray, samples: PosteriorSamples, design: Design) -> float:
    if samples.n_draws == 0:
        raise ValueError("no draws")
    # both terms go through the same summation and are centred on the first
    # draw, so a constant chain gives the point deviance exactly
    ref = samples.draws[0]
    theta_bar = ref + (samples.draws - ref).mean(axis=0)
    dev = -2.0 * ll.sum(axis=0)
    dev_hat = -2.0 * design.subject_log_lik(theta_bar[None, :]).sum(axis=0)[0]
    mean_dev = dev[0] + np.mean(dev - dev[0])
    return float(2.0 * mean_dev - dev_hat)


def subject_log_lik_matrix(
    samples: PosteriorSamples,
    dataset: PanelBinaryDataset,
    grid: TimeGrid,
    design: Design | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """``log P(D_i | theta^(s))`` as an ``(n, S)`` array."""
    design = Design.build(dataset, grid) if design is None else design
    out = np.empty((design.n, samples.n_draws))
    for a in range(0, samples.n_draws, chunk):
        out[:, a : a + chunk] = design.subject_log_lik(samples.draws[a : a + chunk])
    return out


def log_cpo_from_matrix(loglik: np.ndarray) -> np.ndarray:
    """Log harmonic mean of the per-draw likelihoods, row by row."""
    S = loglik.shape[1]
    with np.errstate(invalid="ignore"):
        out = -(logsumexp(-loglik, axis=1) - np.log(S))
    if np.any(np.isneginf(out)):
        log.warning("%d subjects have a draw with zero likelihood; CPO -> 0",
                    int(np.isneginf(out).sum()))
    return out


def cpo(samples: PosteriorSamples, grid: TimeGrid, subject: SubjectRecord) -> float:
    ll = subject_log_lik_matrix(samples, _dataset_of(subject), grid)
    return float(np.exp(log_cpo_from_matrix(ll)[0]))


def lpml(samples: PosteriorSamples, dataset: PanelBinaryDataset, grid: TimeGrid) -> float:
    return float(log_cpo_from_matrix(subject_log_lik_matrix(samples, dataset, grid)).sum())


def divergence_from_matrix(loglik: np.ndarray, kind: DivergenceKind, log_cpo=None) -> np.ndarray:
    log_cpo = log_cpo_from_matrix(loglik) if log_cpo is None else log_cpo
    return kind.phi_log(log_cpo[:, None] - loglik).mean(axis=1)


def influence(
    samples: PosteriorSamples, dataset: PanelBinaryDataset, grid: TimeGrid, kind: DivergenceKind
) -> np.ndarray:
    """Monte Carlo phi-divergence between full and case-deleted posteriors."""
    return divergence_from_matrix(subject_log_lik_matrix(samples, dataset, grid), kind)


@dataclass
class InfluenceReport:
    ids: list
    values: dict          # tag -> (n,) divergence estimates
    flags: dict           # tag -> (n,) bool, strictly above threshold
    cpo: np.ndarray
    lpml: float
    dic: float

    @property
    def n_flagged(self) -> dict:
        return {t: int(f.sum()) for t, f in self.flags.items()}

    def header(self) -> list[str]:
        tags = list(self.values)
        return ["subject_id", *tags, *[f"{t}_flag" for t in tags], "CPO"]

    def rows(self):
        tags = list(self.values)
        for i, sid in enumerate(self.ids):
            yield [
                sid,
                *[self.values[t][i] for t in tags],
                *[int(self.flags[t][i]) for t in tags],
                self.cpo[i],
            ]


def influence_report(
    samples: PosteriorSamples, dataset: PanelBinaryDataset, grid: TimeGrid
) -> InfluenceReport:
    design = Design.build(dataset, grid)
    ll = subject_log_lik_matrix(samples, dataset, grid, design=design)
    lc = log_cpo_from_matrix(ll)
    values, flags = {}, {}
    for tag, kind in DIVERGENCES.items():
        v = divergence_from_matrix(ll, kind, lc)
        values[tag] = v
        flags[tag] = v > kind.threshold
    dic_value = _dic_from_matrix(ll, samples, design)
    return InfluenceReport(
        ids=[s.id for s in dataset.subjects],
        values=values,
        flags=flags,
        cpo=np.exp(lc),
        lpml=float(lc.sum()),
        dic=float(dic_value),
    )


# --------------------------------------------------------------------------
# convergence


def acf(series, max_lag: int) -> np.ndarray:
    """Biased (divide-by-n) sample autocorrelations at lags ``0..max_lag``."""
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least two values")
    c = x - x.mean()
    c0 = c @ c
    if c0 == 0:
        raise ValueError("series has zero variance; autocorrelation undefined")
    max_lag = min(int(max_lag), n - 1)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(c, nfft)
    r = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / c0
    r[0] = 1.0
    return r


def ess(series) -> float:
    """Effective sample size with Geyer's initial positive sequence.

    Paired autocorrelations ``rho_{2k} + rho_{2k+1}`` are summed until the
    first nonpositive pair.  The autocorrelation time is floored at
    ``1 / log10(n)`` so anticorrelated chains report a large, finite ESS.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    r = acf(x, n - 1)
    if r.size % 2:
        r = np.append(r, 0.0)
    pairs = r[0::2] + r[1::2]
    stop = np.flatnonzero(pairs[1:] <= 0)
    m = stop[0] + 1 if stop.size else pairs.size
    tau = -1.0 + 2.0 * pairs[:m].sum()
    tau = max(tau, 1.0 / np.log10(max(n, 10)))
    return n / tau


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for one scalar across ``m >= 2`` chains.

    ``chains`` has shape ``(m, n)``.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (m, n) array with at least two chains")
    m, n = x.shape
    if n < 2:
        raise ValueError("chains need at least two draws")
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W == 0:
        raise ValueError("zero within-chain variance")
    return float(np.sqrt(((n - 1) / n * W + B / n) / W))


@dataclass
class ConvergenceSummary:
    names: list
    ess: np.ndarray                 # per parameter, pooled over chains
    psrf: np.ndarray | None         # per parameter; None for a single chain
    acceptance: list

    @property
    def max_psrf(self) -> float:
        return float(np.nanmax(self.psrf)) if self.psrf is not None else float("nan")


def convergence_summary(chains: list[PosteriorSamples]) -> ConvergenceSummary:
    d = chains[0].draws.shape[1]
    names = chains[0].param_names()

    def _safe(f, *a):
        try:
            return f(*a)
        except ValueError:
            return float("nan")

    e = np.array([sum(_safe(ess, c.draws[:, j]) for c in chains) for j in range(d)])
    psrf = None
    if len(chains) >= 2:
        n = min(c.n_draws for c in chains)
        psrf = np.array(
            [_safe(gelman_rubin, np.stack([c.draws[:n, j] for c in chains])) for j in range(d)]
        )
    return ConvergenceSummary(names, e, psrf, [c.acceptance_rate for c in chains])
