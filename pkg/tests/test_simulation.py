import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from panelmean.model import TimeGrid, build_time_grid
from panelmean.sampler import SamplerConfig
from panelmean.simulation import (
    FIXED_GRID,
    HRS_WAVE_PROPORTIONS,
    LATTICE,
    UNIFORM_TIMES,
    HRSLikeSpec,
    ReplicateResult,
    ScenarioSpec,
    _covariate_mixture,
    elicit_prior,
    gen_covariates,
    gen_observation_times,
    gen_panel_counts,
    gen_panel_indicators,
    generate_dataset,
    generate_hrs_like,
    hrs_baseline_increments,
    hrs_true_baseline,
    mean_mse_baseline,
    run_replication_study,
    summarize,
    true_log_rates,
)


class TestCovariates:
    def test_moments_and_support(self):
        X = gen_covariates(np.random.default_rng(0), 10_000)
        assert set(np.unique(X[:, 0])) == {0.0, 1.0}
        assert abs(X[:, 0].mean() - 0.5) <= 0.015
        assert abs(X[:, 1].mean() - 0.5) <= 0.01
        assert X[:, 1].min() >= 0 and X[:, 1].max() <= 1


class TestObservationTimes:
    def test_lattice(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            t = gen_observation_times(rng, FIXED_GRID)
            assert np.all(np.isin(t, LATTICE))
            assert np.all(np.diff(t) > 0)

    @pytest.mark.parametrize("scenario", [FIXED_GRID, UNIFORM_TIMES])
    def test_visit_count_uniform(self, scenario):
        rng = np.random.default_rng(2)
        v = np.array([gen_observation_times(rng, scenario).size for _ in range(10_000)])
        freq = np.bincount(v, minlength=7)[1:] / v.size
        np.testing.assert_allclose(freq, 1 / 6, atol=0.01)

    def test_uniform_open_support(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            t = gen_observation_times(rng, UNIFORM_TIMES)
            assert 0 < t[0] and t[-1] < 1
            assert np.all(np.diff(t) > 0)

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            gen_observation_times(np.random.default_rng(0), "weekly")


class TestIndicators:
    def test_closed_form_probability(self):
        dmu = math.exp(0.9 + 1.2 * 0.5)
        assert dmu == pytest.approx(4.4817, abs=1e-4)
        p = 1 - math.exp(-dmu)
        assert p == pytest.approx(0.98869, abs=1e-5)
        rng = np.random.default_rng(4)
        b = [gen_panel_indicators(rng, [1.0], [1.0, 0.5], (0.9, 1.2))[0] for _ in range(10_000)]
        assert abs(np.mean(b) - p) <= 0.01

    def test_low_rate_probability(self):
        # beta'x = 0 on (0.2, 0.5]: P(B=1) = 1 - exp(-(0.5^0.9 - 0.2^0.9))
        rng = np.random.default_rng(5)
        b = np.array([gen_panel_indicators(rng, [0.2, 0.5], [0.0, 0.0], (0.9, 1.2))
                      for _ in range(10_000)])
        p = 1 - np.exp(-np.diff([0, 0.2**0.9, 0.5**0.9]))
        np.testing.assert_allclose(b.mean(axis=0), p, atol=0.015)

    def test_increments_poisson_and_independent(self):
        rng = np.random.default_rng(6)
        times = [0.3, 0.6, 1.0]
        x = [1.0, 0.2]
        beta = (0.9, 1.2)
        N = np.array([gen_panel_counts(rng, times, x, beta) for _ in range(10_000)])
        edges = np.concatenate(([0.0], times)) ** 0.9
        means = np.diff(edges) * math.exp(0.9 + 1.2 * 0.2)
        for j, m in enumerate(means):
            assert _poisson_chi2_pvalue(N[:, j], m) > 1e-3
        # the union is Poisson with the summed mean
        assert _poisson_chi2_pvalue(N.sum(axis=1), means.sum()) > 1e-3
        c = np.corrcoef(N.T)
        assert np.abs(c[np.triu_indices(3, 1)]).max() < 0.05

    def test_frailty_inflates_variance(self):
        spec = ScenarioSpec(n=20_000, mixed=True, omega_sd=0.2)
        rng = np.random.default_rng(7)
        counts = []
        for _ in range(spec.n):
            w = rng.normal(0, spec.omega_sd)
            counts.append(gen_panel_counts(rng, [1.0], [0.0, 0.0], spec.beta_true, omega=w)[0])
        counts = np.array(counts)
        # E = e^{s^2/2}; Var = E + E^2 (e^{s^2} - 1)
        m = math.exp(0.02)
        assert counts.mean() == pytest.approx(m, abs=0.03)
        assert counts.var() == pytest.approx(m + m * m * (math.exp(0.04) - 1), abs=0.05)


def _poisson_chi2_pvalue(counts, mean, top=None):
    top = top or int(stats.poisson.ppf(0.999, mean))
    obs = np.bincount(np.minimum(counts, top), minlength=top + 1)
    p = stats.poisson.pmf(np.arange(top), mean)
    exp = np.append(p, 1 - p.sum()) * counts.size
    # merge sparse cells into the tail
    keep = exp >= 5
    o = np.append(obs[keep], obs[~keep].sum())
    e = np.append(exp[keep], exp[~keep].sum())
    if e[-1] == 0:
        o, e = o[:-1], e[:-1]
    return stats.chisquare(o, e).pvalue


class TestDataset:
    def test_deterministic(self):
        spec = ScenarioSpec(n=30, mixed=True)
        a = generate_dataset(spec, np.random.default_rng(8))
        b = generate_dataset(spec, np.random.default_rng(8))
        for s, t in zip(a.subjects, b.subjects):
            assert np.array_equal(s.times, t.times)
            assert np.array_equal(s.indicators, t.indicators)
            assert np.array_equal(s.covariates, t.covariates)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ScenarioSpec(n=0)
        with pytest.raises(ValueError):
            ScenarioSpec(omega_sd=-1)
        with pytest.raises(ValueError):
            ScenarioSpec(beta_true=(1.0,))

    def test_elicited_prior(self):
        g = TimeGrid([0.2, 0.5, 1.0])
        pr = elicit_prior(ScenarioSpec(), g)
        rates = np.exp(true_log_rates(g, 0.9))
        # exact average rate over each cell
        np.testing.assert_allclose(rates * g.widths, np.diff([0, 0.2**0.9, 0.5**0.9, 1.0]))
        np.testing.assert_allclose(pr.beta_mean, [1, 1])
        np.testing.assert_allclose(pr.var, 100.0)


class TestMeanMse:
    def test_examples(self):
        f = lambda t: np.asarray(t) ** 0.9  # noqa: E731
        t = np.array([0.2, 0.5, 1.0])
        assert mean_mse_baseline([f(t), f(t)], f, [t, t]) == 0.0
        assert mean_mse_baseline([[f(0.5) + 0.1]], f, [[0.5]]) == pytest.approx(0.01)
        assert mean_mse_baseline([f(t) + 0.3, f(t) - 0.3], f, [t, t]) == pytest.approx(0.09)

    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=6), st.integers(1, 5))
    @settings(max_examples=30)
    def test_common_grid_equals_mean_over_times(self, errs, reps):
        f = lambda t: np.asarray(t, float)  # noqa: E731
        t = np.linspace(0.1, 1, len(errs))
        rng = np.random.default_rng(len(errs) * reps)
        est = [t + np.asarray(errs) * rng.random() for _ in range(reps)]
        per_time = np.mean([(e - t) ** 2 for e in est], axis=0)
        assert mean_mse_baseline(est, f, [t] * reps) == pytest.approx(per_time.mean(), abs=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_mse_baseline([], lambda t: t, [])


class TestReplication:
    def test_summary_statistics(self):
        def rep(i, est, lo, hi):
            return ReplicateResult(i, np.array(est), np.array([0.1, 0.2]), np.array(lo),
                                   np.array(hi), np.array([1.0]), np.array([1.0]), 0.3)
        spec = ScenarioSpec(beta_true=(1.0, 2.0))
        s = summarize(spec, [rep(0, [0.9, 2.2], [0.5, 2.1], [1.5, 2.5]),
                             rep(1, [1.3, 1.8], [1.1, 1.0], [1.6, 3.0])])
        np.testing.assert_allclose(s.mean, [1.1, 2.0])
        np.testing.assert_allclose(s.abs_bias, [0.1, 0.0], atol=1e-15)
        np.testing.assert_allclose(s.esd, [0.1, 0.2])
        np.testing.assert_allclose(s.sse, [np.std([0.9, 1.3], ddof=1), np.std([2.2, 1.8], ddof=1)])
        np.testing.assert_allclose(s.cp, [0.5, 0.5])
        assert s.mean_mse_baseline == 0.0
        assert [r["parameter"] for r in s.table_rows()] == ["beta_1", "beta_2"]

    def test_small_study_deterministic(self):
        spec = ScenarioSpec(n=40, replications=3, seed=9)
        cfg = SamplerConfig(n_iterations=1500, burn_in=500, thin=5)
        a = run_replication_study(spec, cfg)
        b = run_replication_study(spec, cfg)
        assert a.n_ok == 3 and a.n_failed == 0
        np.testing.assert_array_equal(a.mean, b.mean)
        assert a.mean_mse_baseline == b.mean_mse_baseline
        assert 0 <= a.cp.min() and a.cp.max() <= 1


class TestHRSLike:
    def test_increments_reproduce_wave_proportions(self):
        spec = HRSLikeSpec()
        inc = hrs_baseline_increments(spec)
        prob, risk = _covariate_mixture(spec.beta_true, spec.prevalence)
        p = [prob @ (1 - np.exp(-d * risk)) for d in inc]
        np.testing.assert_allclose(p, HRS_WAVE_PROPORTIONS, atol=1e-12)
        assert prob.sum() == pytest.approx(1.0)

    def test_true_baseline_matches_increments(self):
        spec = HRSLikeSpec()
        inc = hrs_baseline_increments(spec)
        np.testing.assert_allclose(hrs_true_baseline(spec, np.array(spec.wave_times)),
                                   np.cumsum(inc), rtol=1e-13)

    def test_generated_marginals(self):
        ds = generate_hrs_like(HRSLikeSpec(n=20_000, seed=1))
        B = np.array([s.indicators for s in ds.subjects], float)
        np.testing.assert_allclose(B.mean(axis=0), HRS_WAVE_PROPORTIONS, atol=0.015)
        X = np.array([s.covariates for s in ds.subjects])
        np.testing.assert_allclose(X.mean(axis=0), HRSLikeSpec().prevalence, atol=0.015)
        g = build_time_grid(ds)
        np.testing.assert_array_equal(g.points, HRSLikeSpec().wave_times)

    def test_attendance(self):
        ds = generate_hrs_like(HRSLikeSpec(n=2000, attendance=0.7, seed=2))
        v = np.array([len(s.times) for s in ds.subjects])
        assert v.min() >= 1
        assert v.mean() == pytest.approx(6 * 0.7, abs=0.1)

    def test_ids_and_names(self):
        ds = generate_hrs_like(HRSLikeSpec(n=3, seed=3))
        assert [s.id for s in ds.subjects] == ["S0001", "S0002", "S0003"]
        assert ds.k == 6 and len(ds.covariate_names) == 6


def test_coarsened_uniform_replicate():
    spec = ScenarioSpec(n=40, replications=1, scenario=UNIFORM_TIMES, max_points=8, seed=3)
    s = run_replication_study(spec, SamplerConfig(n_iterations=1500, burn_in=500, thin=5))
    assert s.n_ok == 1
    assert s.replicates[0].grid_times.size <= 8
    with pytest.raises(ValueError):
        ScenarioSpec(max_points=0)
