"""Proportional mean model for panel binary recurrent-event data.

The mean function is ``mu(t | x) = mu0(t) * exp(beta'x)`` with a piecewise
linear baseline ``mu0(t) = sum_m exp(rho*_m) * Delta_m(t)`` anchored on the
distinct monitoring times.  Each observation window ``(U_{j-1}, U_j]`` only
records whether at least one event happened, so under the Poisson assumption

    P(B = 1) = 1 - exp(-lambda),   lambda = [mu0(U_j) - mu0(U_{j-1})] e^{beta'x}.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)
_LOG1MEXP_CROSSOVER = np.log(2.0)


class DataError(ValueError):
    """Raised when a dataset, grid or parameter vector fails validation."""


@dataclass(frozen=True)
class SubjectRecord:
    """Monitoring times, binary indicators and covariates of one subject."""

    id: Hashable
    times: np.ndarray
    indicators: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        ind = np.asarray(self.indicators).ravel()
        cov = np.asarray(self.covariates, dtype=float).ravel()
        if times.size < 1:
            raise DataError(f"subject {self.id!r}: needs at least one monitoring time")
        if ind.size != times.size:
            raise DataError(
                f"subject {self.id!r}: {ind.size} indicators for {times.size} times"
            )
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            raise DataError(f"subject {self.id!r}: times must be finite and > 0")
        if np.any(np.diff(times) <= 0):
            raise DataError(
                f"subject {self.id!r}: times must be strictly increasing "
                "(zero-width intervals are not allowed)"
            )
        if not np.all(np.isin(ind, (0, 1))):
            raise DataError(f"subject {self.id!r}: indicators must be 0/1")
        if not np.all(np.isfinite(cov)):
            raise DataError(f"subject {self.id!r}: covariates must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "indicators", ind.astype(bool))
        object.__setattr__(self, "covariates", cov)

    @property
    def n_obs(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class PanelBinaryDataset:
    subjects: tuple
    covariate_names: tuple = ()

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise DataError("dataset has no subjects")
        k = subjects[0].covariates.size
        for s in subjects:
            if s.covariates.size != k:
                raise DataError(
                    f"subject {s.id!r} has {s.covariates.size} covariates, expected {k}"
                )
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(k))
        if len(names) != k:
            raise DataError(f"{len(names)} covariate names for dimension {k}")
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def k(self) -> int:
        return self.subjects[0].covariates.size

    def all_times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])


@dataclass(frozen=True)
class TimeGrid:
    """Grid points ``t_1 < ... < t_M``; ``t_0 = 0`` is implicit."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size < 1:
            raise DataError("time grid needs at least one point")
        if np.any(pts <= 0) or np.any(np.diff(pts) <= 0):
            raise DataError("time grid must be positive and strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def M(self) -> int:
        return self.points.size

    @property
    def edges(self) -> np.ndarray:
        """``(t_0, t_1, ..., t_M)`` with ``t_0 = 0``."""
        return np.concatenate(([0.0], self.points))

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def delta_matrix(self, t) -> np.ndarray:
        """Rows ``(Delta_1(t), ..., Delta_M(t))`` for each entry of ``t``."""
        t = np.asarray(t, dtype=float)
        e = self.edges
        return np.minimum(e[1:], t[..., None]) - np.minimum(e[:-1], t[..., None])


@dataclass(frozen=True)
class ModelParams:
    beta: np.ndarray
    rho_star: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float)).ravel()
        r = np.atleast_1d(np.asarray(self.rho_star, dtype=float)).ravel()
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(r))):
            raise DataError("parameters must be finite")
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "rho_star", r)

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.rho_star)

    def to_vector(self) -> np.ndarray:
        """Stacked ``(beta_1..beta_k, rho*_1..rho*_M)``."""
        return np.concatenate((self.beta, self.rho_star))

    @classmethod
    def from_vector(cls, theta, k: int) -> "ModelParams":
        theta = np.asarray(theta, dtype=float)
        return cls(beta=theta[:k], rho_star=theta[k:])


@dataclass(frozen=True)
class PriorSpec:
    """Independent normal priors on ``beta`` and ``rho*`` (diagonal covariances)."""

    beta_mean: np.ndarray
    beta_var: np.ndarray
    rho_star_mean: np.ndarray
    rho_star_var: np.ndarray

    def __post_init__(self):
        for name in ("beta_mean", "beta_var", "rho_star_mean", "rho_star_var"):
            object.__setattr__(
                self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel()
            )
        if self.beta_mean.size != self.beta_var.size:
            raise DataError("beta prior mean/variance lengths differ")
        if self.rho_star_mean.size != self.rho_star_var.size:
            raise DataError("rho* prior mean/variance lengths differ")
        if np.any(self.beta_var <= 0) or np.any(self.rho_star_var <= 0):
            raise DataError("prior variances must be > 0")

    @property
    def k(self) -> int:
        return self.beta_mean.size

    @property
    def M(self) -> int:
        return self.rho_star_mean.size

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate((self.beta_mean, self.rho_star_mean))

    @property
    def var(self) -> np.ndarray:
        return np.concatenate((self.beta_var, self.rho_star_var))

    @classmethod
    def vague(cls, k: int, M: int, variance: float = 100.0) -> "PriorSpec":
        return cls(np.zeros(k), np.full(k, variance), np.zeros(M), np.full(M, variance))

    def mean_params(self) -> ModelParams:
        return ModelParams(self.beta_mean.copy(), self.rho_star_mean.copy())


def build_time_grid(dataset: PanelBinaryDataset, max_points: int | None = None) -> TimeGrid:
    """Distinct monitoring times, optionally coarsened to at most ``max_points``.

    Coarsening takes empirical quantiles of the pooled monitoring times at
    levels ``j / max_points`` and forces the last point to the pooled maximum.
    """
    if dataset is None or dataset.n == 0:
        raise DataError("cannot build a grid from an empty dataset")
    pooled = dataset.all_times()
    distinct = np.unique(pooled)
    if max_points is None or distinct.size <= max_points:
        return TimeGrid(distinct)
    if max_points < 1:
        raise DataError("max_points must be a positive integer")
    levels = np.arange(1, max_points + 1) / max_points
    pts = np.unique(np.quantile(pooled, levels))
    pts[-1] = pooled.max()
    return TimeGrid(pts)


def delta_m(grid: TimeGrid, m: int, t: float) -> float:
    """``min(t_m, t) - min(t_{m-1}, t)`` for 1-based cell index ``m``."""
    if not 1 <= m <= grid.M:
        raise IndexError(f"cell index {m} outside 1..{grid.M}")
    if t < 0:
        raise DataError("t must be nonnegative")
    e = grid.edges
    return float(min(e[m], t) - min(e[m - 1], t))


def _check_dims(params: ModelParams, grid: TimeGrid, x=None):
    if params.rho_star.size != grid.M:
        raise DataError(f"rho* has length {params.rho_star.size}, grid has M={grid.M}")
    if x is not None and np.size(x) != params.beta.size:
        raise DataError(f"covariate length {np.size(x)} != k={params.beta.size}")


def baseline_mean(params: ModelParams, grid: TimeGrid, t) -> float:
    _check_dims(params, grid)
    if np.any(np.asarray(t) < 0):
        raise DataError("t must be nonnegative")
    out = grid.delta_matrix(t) @ params.rho
    return float(out) if np.ndim(out) == 0 else out


def conditional_mean(params: ModelParams, grid: TimeGrid, x, t) -> float:
    _check_dims(params, grid, x)
    return baseline_mean(params, grid, t) * np.exp(np.dot(params.beta, np.asarray(x, float)))


def interval_load(params: ModelParams, grid: TimeGrid, u_prev: float, u_next: float, x) -> float:
    """Expected event count of the window ``(u_prev, u_next]`` for covariates ``x``."""
    _check_dims(params, grid, x)
    if not u_next > u_prev:
        raise DataError(f"empty interval ({u_prev}, {u_next}]")
    if u_prev < 0 or u_next > grid.points[-1]:
        raise DataError(f"interval ({u_prev}, {u_next}] not inside (0, t_M]")
    dmu = baseline_mean(params, grid, u_next) - baseline_mean(params, grid, u_prev)
    return float(dmu * np.exp(np.dot(params.beta, np.asarray(x, float))))


def log1mexp(lam):
    """Stable ``log(1 - exp(-lam))`` for ``lam >= 0``."""
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore"):
        small = lam < _LOG1MEXP_CROSSOVER
        return np.where(
            small,
            np.log(-np.expm1(-np.where(small, lam, 1.0))),
            np.log1p(-np.exp(-np.where(small, 1.0, lam))),
        )


class Design:
    """Flattened interval representation of a dataset on a grid.

    ``widths[r, m]`` is ``Delta_m(U_j) - Delta_m(U_{j-1})`` for interval row ``r``
    and ``subject[r]`` maps rows back to subjects.  For the hot path the
    ``B = 0`` rows are pre-summed per subject, since their contribution
    ``-lambda`` is linear in the widths.
    """

    def __init__(self, widths, subject, indicators, X):
        self.widths = np.asarray(widths, dtype=float)
        self.subject = np.asarray(subject, dtype=np.intp)
        self.indicators = np.asarray(indicators, dtype=bool)
        self.X = np.asarray(X, dtype=float)
        n = self.X.shape[0]
        counts = np.bincount(self.subject, minlength=n)
        if np.any(counts == 0):
            raise DataError("every subject needs at least one interval")
        self.offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        zero = ~self.indicators
        self._agg0 = np.zeros((n, self.M))
        np.add.at(self._agg0, self.subject[zero], self.widths[zero])
        self._w1 = self.widths[self.indicators]
        self._sub1 = self.subject[self.indicators]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> int:
        return self.widths.shape[1]

    @classmethod
    def build(cls, dataset: PanelBinaryDataset, grid: TimeGrid) -> "Design":
        t_max = grid.points[-1]
        rows, subj, ind = [], [], []
        for i, s in enumerate(dataset.subjects):
            if s.times[-1] > t_max * (1 + 1e-12):
                raise DataError(
                    f"subject {s.id!r}: time {s.times[-1]} beyond grid end {t_max}"
                )
            d = grid.delta_matrix(np.concatenate(([0.0], s.times)))
            rows.append(np.diff(d, axis=0))
            subj.append(np.full(s.n_obs, i))
            ind.append(s.indicators)
        widths = np.vstack(rows)
        if np.any(widths.sum(axis=1) <= 0):
            raise DataError("zero-width observation interval")
        X = np.vstack([s.covariates for s in dataset.subjects]).reshape(dataset.n, dataset.k)
        return cls(widths, np.concatenate(subj), np.concatenate(ind), X)

    def loads(self, theta) -> np.ndarray:
        """Interval loads ``lambda``; ``theta`` may be ``(d,)`` or ``(S, d)``."""
        theta = np.asarray(theta, dtype=float)
        k = self.k
        if theta.ndim == 1:
            base = self.widths @ np.exp(theta[k:])
            return base * np.exp(self.X @ theta[:k])[self.subject]
        base = self.widths @ np.exp(theta[:, k:]).T
        return base * np.exp(self.X @ theta[:, :k].T)[self.subject]

    def interval_log_lik(self, theta) -> np.ndarray:
        """Per-interval log-likelihood terms; shape ``(rows,)`` or ``(rows, S)``."""
        lam = self.loads(theta)
        ind = self.indicators if lam.ndim == 1 else self.indicators[:, None]
        with np.errstate(over="ignore", invalid="ignore"):
            return np.where(ind, log1mexp(lam), -lam)

    def subject_log_lik(self, theta) -> np.ndarray:
        """Per-subject log-likelihood; shape ``(n,)`` or ``(n, S)``."""
        return np.add.reduceat(self.interval_log_lik(theta), self.offsets, axis=0)

    def log_lik(self, theta) -> float:
        k = self.k
        rho = np.exp(theta[k:])
        eta = np.exp(self.X @ theta[:k])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ll0 = -(eta @ (self._agg0 @ rho))
            lam = (self._w1 @ rho) * eta[self._sub1]
            small = lam < _LOG1MEXP_CROSSOVER
            ll1 = np.where(small, np.log(-np.expm1(-lam)), np.log1p(-np.exp(-lam)))
            return float(ll0 + ll1.sum())

    def grad_log_lik(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        k = self.k
        eta = np.exp(self.X @ theta[:k])[self.subject]
        rho = np.exp(theta[k:])
        lam = (self.widths @ rho) * eta
        with np.errstate(divide="ignore", over="ignore"):
            dl = np.where(self.indicators, 1.0 / np.expm1(lam), -1.0)
        g_lam = dl * lam
        g_beta = np.bincount(self.subject, weights=g_lam, minlength=self.n) @ self.X
        g_rho = ((dl * eta) @ self.widths) * rho
        return np.concatenate((g_beta, g_rho))


def log_prior_vector(theta, prior: PriorSpec) -> float:
    theta = np.asarray(theta, dtype=float)
    mean, var = prior.mean, prior.var
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + (theta - mean) ** 2 / var))


def grad_log_prior_vector(theta, prior: PriorSpec) -> np.ndarray:
    return -(np.asarray(theta, dtype=float) - prior.mean) / prior.var


def _check_prior(params: ModelParams, prior: PriorSpec):
    if params.beta.size != prior.k or params.rho_star.size != prior.M:
        raise DataError(
            f"params (k={params.beta.size}, M={params.rho_star.size}) do not match "
            f"prior (k={prior.k}, M={prior.M})"
        )


def log_likelihood(params: ModelParams, dataset: PanelBinaryDataset, grid: TimeGrid) -> float:
    _check_dims(params, grid)
    if params.beta.size != dataset.k:
        raise DataError(f"beta has length {params.beta.size}, dataset has k={dataset.k}")
    value = Design.build(dataset, grid).log_lik(params.to_vector())
    if np.isnan(value) or value == np.inf:
        raise FloatingPointError("non-finite log-likelihood (overflow in exp(beta'x)?)")
    return value


def log_prior(params: ModelParams, prior: PriorSpec) -> float:
    _check_prior(params, prior)
    return log_prior_vector(params.to_vector(), prior)


def log_posterior(
    params: ModelParams, dataset: PanelBinaryDataset, grid: TimeGrid, prior: PriorSpec
) -> float:
    """Unnormalized log posterior density."""
    return log_likelihood(params, dataset, grid) + log_prior(params, prior)


class Posterior:
    """Log posterior over stacked ``theta = (beta, rho*)`` with cached design.

    ``dataset=None`` gives a prior-only target, which is useful for checking
    the sampler and optimizer against a known Gaussian.
    """

    def __init__(self, dataset: PanelBinaryDataset | None, grid: TimeGrid | None, prior: PriorSpec):
        self.prior = prior
        self.design = None if dataset is None else Design.build(dataset, grid)
        if self.design is not None and (self.design.k != prior.k or self.design.M != prior.M):
            raise DataError(
                f"prior dimensions (k={prior.k}, M={prior.M}) do not match data "
                f"(k={self.design.k}, M={self.design.M})"
            )
        self._mean = prior.mean
        self._prec = 1.0 / prior.var
        self._const = -0.5 * np.sum(LOG_2PI + np.log(prior.var))

    @property
    def k(self) -> int:
        return self.prior.k

    @property
    def dim(self) -> int:
        return self.prior.k + self.prior.M

    def log_prior(self, theta) -> float:
        r = theta - self._mean
        return self._const - 0.5 * float(r @ (r * self._prec))

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        lp = self.log_prior(theta)
        if self.design is None:
            return lp
        with np.errstate(over="ignore", invalid="ignore"):
            ll = self.design.log_lik(theta)
        if np.isnan(ll):
            return -np.inf
        return lp + ll

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        g = -(theta - self._mean) * self._prec
        if self.design is not None:
            g = g + self.design.grad_log_lik(theta)
        return g


def subjects_from_arrays(
    times: Sequence, indicators: Sequence, covariates, ids=None, covariate_names=()
) -> PanelBinaryDataset:
    """Assemble a dataset from parallel per-subject sequences."""
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    ids = range(len(times)) if ids is None else ids
    subjects = [
        SubjectRecord(i, t, b, x) for i, t, b, x in zip(ids, times, indicators, covariates)
    ]
    return PanelBinaryDataset(tuple(subjects), tuple(covariate_names))
