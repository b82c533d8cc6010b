"""Fit -> summarize -> diagnose pipeline behind the ``fit`` and ``diagnose`` commands."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .diagnostics import (
    DIVERGENCES,
    ConvergenceSummary,
    InfluenceReport,
    acf,
    convergence_summary,
    influence_report,
)
from .model import DataError, PanelBinaryDataset, PriorSpec, TimeGrid, build_time_grid
from .sampler import (
    PosteriorSamples,
    SamplerConfig,
    bayes_estimate_beta,
    bayes_estimate_rho,
    credible_interval,
    pool,
    posterior_sd,
    run_chains,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SAMPLER = 3
EXIT_CONVERGENCE = 4
PSRF_WARNING = 1.1

PLOT_KINDS = ("baseline", "mean_function", "influence", "acf", "trace", "histogram")


def _floats(v) -> tuple | None:
    if v is None or v == "":
        return None
    if isinstance(v, str):
        return tuple(float(p) for p in v.replace(";", ",").split(",") if p.strip())
    return tuple(float(p) for p in np.atleast_1d(v))


@dataclass
class RunConfig:
    input: str = ""
    covariates: tuple | None = None
    prior: str = "vague"           # "vague" or "explicit"
    prior_variance: float = 100.0
    beta_mean: tuple | None = None
    beta_var: tuple | None = None
    rho_star_mean: tuple | None = None
    rho_star_var: tuple | None = None
    iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 10
    adapt_start: int = 1_000
    adapt_interval: int = 100
    seed: int = 0
    chains: int = 2
    max_points: int | None = None
    output_dir: str | None = None
    formats: tuple = ("csv", "txt")

    def __post_init__(self):
        if self.chains < 1:
            raise DataError("chains must be >= 1")
        if self.prior not in ("vague", "explicit"):
            raise DataError(f"unknown prior preset {self.prior!r}")

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        """Build from string-valued key/value pairs (config file or CLI)."""
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise DataError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kw = {}
        for k, v in d.items():
            if v is None:
                continue
            if k in ("iterations", "burn_in", "thin", "adapt_start", "adapt_interval",
                     "seed", "chains"):
                kw[k] = int(v)
            elif k == "max_points":
                kw[k] = None if v in ("", "none", "None") else int(v)
            elif k == "prior_variance":
                kw[k] = float(v)
            elif k in ("beta_mean", "beta_var", "rho_star_mean", "rho_star_var"):
                kw[k] = _floats(v)
            elif k in ("covariates", "formats"):
                kw[k] = tuple(p.strip() for p in v.split(",") if p.strip()) if isinstance(v, str) else tuple(v)
            else:
                kw[k] = v
        return cls(**kw)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            n_iterations=self.iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            adapt_start=self.adapt_start,
            adapt_interval=self.adapt_interval,
            seed=self.seed,
        )

    def build_prior(self, k: int, M: int) -> PriorSpec:
        v = self.prior_variance
        if self.prior == "vague":
            return PriorSpec.vague(k, M, v)

        def pick(val, n, default):
            if val is None:
                return np.full(n, default)
            if len(val) == 1:
                return np.full(n, val[0])
            if len(val) != n:
                raise DataError(f"prior vector of length {len(val)}, expected {n}")
            return np.asarray(val)

        return PriorSpec(
            pick(self.beta_mean, k, 0.0), pick(self.beta_var, k, v),
            pick(self.rho_star_mean, M, 0.0), pick(self.rho_star_var, M, v),
        )


@dataclass
class AnalysisReport:
    names: list
    estimate: np.ndarray
    sd: np.ndarray
    bci: np.ndarray                 # (k, 2)
    percent_effect: np.ndarray
    rho_estimate: np.ndarray
    grid: TimeGrid
    dic: float
    lpml: float
    influence: InfluenceReport
    convergence: ConvergenceSummary
    chains: list = field(repr=False)
    pooled: PosteriorSamples = field(repr=False)
    config: RunConfig | None = None

    @property
    def exit_code(self) -> int:
        c = self.convergence
        if c.psrf is not None and c.max_psrf > PSRF_WARNING:
            return EXIT_CONVERGENCE
        return EXIT_OK

    def baseline_curve(self, t=None):
        t = np.concatenate(([0.0], self.grid.points)) if t is None else np.asarray(t, float)
        return t, self.grid.delta_matrix(t) @ self.rho_estimate

    def mean_curve(self, x, t=None):
        t, mu0 = self.baseline_curve(t)
        return t, mu0 * np.exp(self.estimate @ np.asarray(x, float))

    def estimates_rows(self):
        for j, name in enumerate(self.names):
            yield [name, self.estimate[j], self.sd[j], self.bci[j, 0], self.bci[j, 1],
                   self.percent_effect[j]]

    def summary_text(self) -> str:
        lines = ["Summary of Bayesian estimates", ""]
        lines.append(f"{'Parameter':<14}{'Estimate':>10}{'Post. SD':>10}   95% BCI"
                     f"{'':>14}{'% effect*':>10}")
        for name, e, s, lo, hi, p in self.estimates_rows():
            lines.append(f"{name:<14}{e:>10.4f}{s:>10.4f}   ({lo:.4f}, {hi:.4f})"
                         f"{p:>12.2f}")
        lines += [
            "",
            f"DIC   {self.dic:.4f}",
            f"LPML  {self.lpml:.4f}",
            "",
            "Influential subjects (divergence above calibration threshold):",
        ]
        for tag, cnt in self.influence.n_flagged.items():
            lines.append(f"  {tag:<6}{cnt:>5}   threshold {DIVERGENCES[tag].threshold}")
        c = self.convergence
        lines += ["", "Convergence:"]
        lines.append("  acceptance rate per chain: "
                     + ", ".join(f"{a:.4f}" for a in c.acceptance))
        if c.psrf is not None:
            lines.append(f"  max PSRF {c.max_psrf:.4f}" + (
                "  WARNING: above 1.1" if c.max_psrf > PSRF_WARNING else ""))
        lines.append(f"  min ESS  {np.nanmin(c.ess):.1f}")
        lines += [
            "",
            "* percent effect = 100 (exp(beta) - 1) for every coefficient. A negative",
            "  coefficient on an indicator can also be read in the reverse direction as",
            "  100 (1 - exp(beta)) fewer events for the indicated group.",
        ]
        return "\n".join(lines) + "\n"


def summarize(chains: list[PosteriorSamples], dataset: PanelBinaryDataset, grid: TimeGrid,
              config: RunConfig | None = None) -> AnalysisReport:
    pooled = pool(chains)
    k = dataset.k
    est = bayes_estimate_beta(pooled)
    sd = posterior_sd(pooled)[:k]
    bci = np.array([credible_interval(pooled, j, 0.95) for j in range(k)]).reshape(k, 2)
    infl = influence_report(pooled, dataset, grid)
    return AnalysisReport(
        names=list(dataset.covariate_names),
        estimate=est,
        sd=sd,
        bci=bci,
        percent_effect=100.0 * np.expm1(est),
        rho_estimate=bayes_estimate_rho(pooled),
        grid=grid,
        dic=infl.dic,
        lpml=infl.lpml,
        influence=infl,
        convergence=convergence_summary(chains),
        chains=chains,
        pooled=pooled,
        config=config,
    )


def fit(dataset: PanelBinaryDataset, config: RunConfig) -> AnalysisReport:
    grid = build_time_grid(dataset, config.max_points)
    prior = config.build_prior(dataset.k, grid.M)
    chains = run_chains(dataset, grid, prior, config.sampler_config(), config.chains)
    return summarize(chains, dataset, grid, config)


def run_analysis(config: RunConfig) -> AnalysisReport:
    dataset = io.read_dataset(config.input, config.covariates)
    report = fit(dataset, config)
    if config.output_dir:
        write_report(report, config.output_dir)
    return report


def _config_lines(config: RunConfig | None) -> list[str]:
    if config is None:
        return []
    out = []
    for k, v in asdict(config).items():
        if isinstance(v, tuple):
            v = ",".join(str(p) for p in v)
        out.append(f"{k} = {'' if v is None else v}")
    return out


def write_report(report: AnalysisReport, outdir) -> list[Path]:
    """Write every report artifact; contents depend only on data, config and seed."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        io.write_table(out / "estimates.csv",
                       ["parameter", "estimate", "posterior_sd", "bci_low", "bci_high",
                        "percent_effect"], report.estimates_rows()),
        io.write_table(out / "criteria.csv", ["criterion", "value"],
                       [["DIC", report.dic], ["LPML", report.lpml]]),
        io.write_table(out / "influence.csv", report.influence.header(),
                       report.influence.rows()),
        io.write_grid(report.grid, out / "grid.csv"),
    ]
    t, mu0 = report.baseline_curve()
    paths.append(io.write_table(out / "baseline.csv", ["t", "baseline_mean"], zip(t, mu0)))
    c = report.convergence
    rows = []
    for j, name in enumerate(c.names):
        rows.append([name, c.ess[j], "" if c.psrf is None else c.psrf[j]])
    paths.append(io.write_table(out / "convergence.csv", ["parameter", "ess", "psrf"], rows))
    paths.append(io.write_table(out / "acceptance.csv", ["chain", "acceptance_rate"],
                                [[i + 1, a] for i, a in enumerate(c.acceptance)]))
    for i, ch in enumerate(report.chains):
        paths.append(io.write_draws(ch, out / f"draws_chain{i + 1}.csv"))
    meta = _config_lines(report.config)
    (out / "metadata.txt").write_text("\n".join(meta) + "\n")
    (out / "summary.txt").write_text(report.summary_text())
    paths += [out / "metadata.txt", out / "summary.txt"]
    return paths


def emit_plot_data(report: AnalysisReport, kind: str, outdir, max_lag: int = 40,
                   bins: int = 30) -> list[Path]:
    """Plot-ready delimited text for one figure kind."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    names = report.pooled.param_names()
    paths = []
    if kind == "baseline":
        t, v = report.baseline_curve()
        paths.append(io.write_table(out / "plot_baseline.csv", ["t", "baseline_mean"], zip(t, v)))
    elif kind == "mean_function":
        k = len(report.names)
        for j, name in enumerate(report.names):
            e = np.zeros(k)
            e[j] = 1.0
            t, v0 = report.mean_curve(np.zeros(k))
            _, v1 = report.mean_curve(e)
            paths.append(io.write_table(out / f"plot_mean_function_{name}.csv",
                                        ["t", f"{name}=0", f"{name}=1"], zip(t, v0, v1)))
    elif kind == "influence":
        for tag, vals in report.influence.values.items():
            thr = DIVERGENCES[tag].threshold
            paths.append(io.write_table(
                out / f"plot_influence_{tag}.csv", ["index", "value", "threshold"],
                ((i + 1, v, thr) for i, v in enumerate(vals))))
    elif kind in ("acf", "trace", "histogram"):
        for c, ch in enumerate(report.chains):
            for j, name in enumerate(names):
                x = ch.draws[:, j]
                stem = f"plot_{kind}_{name}_chain{c + 1}.csv"
                if kind == "acf":
                    try:
                        r = acf(x, max_lag)
                    except ValueError:
                        continue
                    paths.append(io.write_table(out / stem, ["lag", "acf"], enumerate(r)))
                elif kind == "trace":
                    paths.append(io.write_table(out / stem, ["iteration", "value"],
                                                ((i + 1, v) for i, v in enumerate(x))))
                else:
                    counts, edges = np.histogram(x, bins=bins)
                    paths.append(io.write_table(
                        out / stem, ["bin_low", "bin_high", "count"],
                        zip(edges[:-1], edges[1:], counts)))
    return paths


def diagnose(dataset: PanelBinaryDataset, grid: TimeGrid, chains: list[PosteriorSamples],
             outdir=None) -> AnalysisReport:
    """Recompute estimates and diagnostics from saved draw matrices."""
    for ch in chains:
        if ch.k != dataset.k or ch.M != grid.M:
            raise DataError(
                f"draw matrix has k={ch.k}, M={ch.M}; data/grid have k={dataset.k}, M={grid.M}"
            )
    report = summarize(chains, dataset, grid)
    if outdir:
        write_report(report, outdir)
    return report
