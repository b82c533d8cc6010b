import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from panelmean.diagnostics import ess
from panelmean.model import ModelParams, Posterior, PriorSpec, TimeGrid, build_time_grid
from panelmean.sampler import (
    ChainState,
    PosteriorSamples,
    SamplerConfig,
    SamplerError,
    accept_probability,
    bayes_estimate_beta,
    bayes_estimate_rho,
    chain_seeds,
    credible_interval,
    estimate_baseline_mean,
    estimate_mean_function,
    find_map,
    numerical_hessian,
    observed_information,
    pool,
    repair_information,
    run_chain,
    run_chains,
    sample_posterior,
)
from panelmean.simulation import ScenarioSpec, elicit_prior, generate_dataset

from conftest import make_dataset


def _samples(draws, k):
    draws = np.atleast_2d(np.asarray(draws, float))
    return PosteriorSamples(draws, np.zeros(draws.shape[0]), k)


class TestConfig:
    def test_retained_count_long_protocols(self):
        assert SamplerConfig.long_simulation().n_retained == 1600
        assert SamplerConfig.long_application().n_retained == 1600

    @pytest.mark.parametrize("kw", [
        dict(n_iterations=0), dict(n_iterations=100, burn_in=100), dict(thin=0),
        dict(proposal_scale=0.0), dict(jitter=0.0), dict(adapt_interval=0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)

    @given(st.integers(1, 3000), st.integers(0, 2999), st.integers(1, 60))
    @settings(max_examples=40, deadline=None)
    def test_retained_count_on_chain(self, n, b, thin):
        if b >= n:
            b = n - 1
        cfg = SamplerConfig(n_iterations=n, burn_in=b, thin=thin, adapt_start=10**9)
        pr = PriorSpec([], [], [0.0], [1.0])
        s = run_chain(None, None, pr, cfg)
        assert s.n_draws == (n - b) // thin == cfg.n_retained


class TestAcceptProbability:
    def test_examples(self):
        assert accept_probability(-3.0, -3.0) == 1.0
        assert accept_probability(-3.0, 10.0) == 1.0
        assert accept_probability(0.0, -0.5) == pytest.approx(0.6065306597126334, rel=1e-15)
        assert accept_probability(0.0, -np.inf) == 0.0

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_in_unit_interval(self, a, b):
        p = accept_probability(a, b)
        assert 0.0 <= p <= 1.0
        assert p == pytest.approx(min(1.0, math.exp(min(0.0, b - a))))


class TestMap:
    def test_prior_only_is_prior_mean(self):
        pr = PriorSpec([0.4, -1.0], [2.0, 3.0], [0.7], [5.0])
        m = find_map(None, None, pr, init=ModelParams([3.0, 3.0], [-2.0]))
        np.testing.assert_allclose(m.to_vector(), pr.mean, atol=1e-7)

    def test_flat_prior_matches_grid_search(self):
        # four subjects seen once at t=1, three with an event: p = 0.75, lambda = log 4
        ds = make_dataset([([1.0], [b], []) for b in (1, 1, 1, 0)])
        g = build_time_grid(ds)
        pr = PriorSpec([], [], [0.0], [1e6])
        m = find_map(ds, g, pr, init=ModelParams([], [0.5]))
        # independent grid search of the likelihood in closed form
        r = np.linspace(-2, 2, 400_001)
        lam = np.exp(r)
        ll = 3 * np.log1p(-np.exp(-lam)) - lam
        assert m.rho_star[0] == pytest.approx(r[np.argmax(ll)], abs=1e-3)
        assert m.rho_star[0] == pytest.approx(math.log(math.log(4)), abs=1e-3)

    def test_mirrored_covariate_gives_zero_effect(self):
        ds = make_dataset([([0.5, 1.0], [1, 0], [1.0]), ([0.5, 1.0], [1, 0], [-1.0])])
        g = build_time_grid(ds)
        pr = PriorSpec([0.0], [100.0], [0.0, 0.0], [100.0, 100.0])
        m = find_map(ds, g, pr, init=ModelParams([0.8], [0.0, 0.0]))
        assert abs(m.beta[0]) < 1e-6

    def test_gradient_small_at_map(self, rng):
        ds = generate_dataset(ScenarioSpec(n=60), rng)
        g = build_time_grid(ds)
        pr = elicit_prior(ScenarioSpec(n=60), g)
        m = find_map(ds, g, pr)
        post = Posterior(ds, g, pr)
        th = m.to_vector()
        assert np.linalg.norm(post.grad(th)) <= 1e-5 * (1 + abs(post(th)))


class TestObservedInformation:
    def test_unit_prior_is_identity(self):
        pr = PriorSpec([0.0], [1.0], [0.0, 0.0], [1.0, 1.0])
        info = observed_information(None, None, pr, ModelParams([0.3], [0.1, -0.2]))
        np.testing.assert_allclose(info, np.eye(3), atol=1e-7)

    def test_variance_four(self):
        pr = PriorSpec([0.0], [4.0], [0.0], [1.0])
        info = observed_information(None, None, pr, pr.mean_params())
        assert info[0, 0] == pytest.approx(0.25, abs=1e-7)
        assert info[1, 1] == pytest.approx(1.0, abs=1e-7)

    def test_second_derivative_at_mle(self):
        ds = make_dataset([([1.0], [b], []) for b in (1, 1, 1, 0)])
        g = build_time_grid(ds)
        pr = PriorSpec([], [], [0.0], [1e6])
        at = ModelParams([], [math.log(math.log(4))])
        got = observed_information(ds, g, pr, at)[0, 0]
        # d2/drho2 of 3 log(1 - e^-lam) - lam with lam = e^rho
        # d/drho log(1 - e^-lam) = lam g(lam), g = 1 / (e^lam - 1)
        lam = math.log(4)
        g = 1 / (math.exp(lam) - 1)
        gp = -math.exp(lam) / (math.exp(lam) - 1) ** 2
        d2_event = lam * g + lam * lam * gp
        expected = -(3 * d2_event - lam) + 1e-6
        assert got == pytest.approx(expected, rel=1e-4)

    def test_repair_floors_eigenvalues(self):
        A = np.diag([4.0, -1.0, 1e-9])
        R = repair_information(A)
        w = np.linalg.eigvalsh(R)
        assert w.min() == pytest.approx(4e-6)
        assert w.max() == pytest.approx(4.0)
        np.testing.assert_allclose(R, R.T)

    def test_repair_rejects_negative_definite(self):
        with pytest.raises(SamplerError):
            repair_information(-np.eye(2))

    def test_nonfinite_second_differences(self):
        with pytest.raises(SamplerError):
            numerical_hessian(lambda th: np.full_like(th, np.nan), np.zeros(2))


class TestHistoryMoments:
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_blockwise_merge_equals_full_covariance(self, sizes, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(sum(sizes) + 2, 3))
        st_ = ChainState(np.zeros(3), 0.0)
        a = 0
        for s in sizes + [2]:
            st_.absorb(X[a:a + s])
            a += s
        np.testing.assert_allclose(st_.hist_mean, X.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(st_.history_cov, np.cov(X.T), atol=1e-10)


class TestChain:
    def test_reproducible(self, rng):
        ds = generate_dataset(ScenarioSpec(n=30), rng)
        g = build_time_grid(ds)
        pr = PriorSpec.vague(2, g.M)
        cfg = SamplerConfig(n_iterations=3000, burn_in=500, thin=5, seed=17)
        a = run_chain(ds, g, pr, cfg)
        b = run_chain(ds, g, pr, cfg)
        assert np.array_equal(a.draws, b.draws)
        assert np.array_equal(a.log_posts, b.log_posts)
        c = run_chain(ds, g, pr, SamplerConfig(n_iterations=3000, burn_in=500, thin=5, seed=18))
        assert not np.array_equal(a.draws, c.draws)

    def test_log_posts_match_draws(self, rng):
        ds = generate_dataset(ScenarioSpec(n=30), rng)
        g = build_time_grid(ds)
        pr = PriorSpec.vague(2, g.M)
        s = run_chain(ds, g, pr, SamplerConfig(n_iterations=2000, burn_in=200, thin=9))
        post = Posterior(ds, g, pr)
        for th, lp in zip(s.draws[::13], s.log_posts[::13]):
            assert post(th) == lp
        assert np.all(np.isfinite(s.draws))
        assert 0 < s.acceptance_rate < 1

    def test_prior_only_mean_and_covariance(self):
        pr = PriorSpec([1.0, -0.5], [0.25, 4.0], [0.3], [1.0])
        cfg = SamplerConfig(n_iterations=60_000, burn_in=2_000, thin=1, seed=5)
        s = run_chain(None, None, pr, cfg)
        sd = np.sqrt(pr.var)
        for j in range(3):
            x = s.draws[:, j]
            n_eff = ess(x)
            assert abs(x.mean() - pr.mean[j]) <= 3 * sd[j] / math.sqrt(n_eff)
            # standard error of a sample variance is about var * sqrt(2 / ESS)
            assert abs(x.var(ddof=1) - pr.var[j]) <= 3 * pr.var[j] * math.sqrt(2 / n_eff)

    def test_detailed_balance_bookkeeping(self, rng):
        ds = generate_dataset(ScenarioSpec(n=20), rng)
        g = build_time_grid(ds)
        pr = PriorSpec.vague(2, g.M)
        s = run_chain(ds, g, pr, SamplerConfig(n_iterations=4000, burn_in=100, thin=1,
                                               record_transitions=True, seed=3))
        t = s.transitions
        with np.errstate(divide="ignore"):
            offline = np.array([
                math.log(accept_probability(c, d)) if accept_probability(c, d) > 0 else -np.inf
                for c, d in zip(t["current"], t["candidate"])
            ])
        np.testing.assert_array_equal(t["accepted"], t["log_u"] <= offline)
        assert s.acceptance_rate == t["accepted"].mean()
        # the current log posterior only changes on accepted steps
        nxt = np.where(t["accepted"], t["candidate"], t["current"])
        np.testing.assert_array_equal(nxt[:-1], t["current"][1:])

    def test_nonfinite_init_rejected(self):
        pr = PriorSpec([], [], [0.0], [1.0])
        ds = make_dataset([([1.0], [0], [])])
        # the load exp(800) overflows, so the no-event term is -inf
        cfg = SamplerConfig(n_iterations=10, burn_in=0, init=ModelParams([], [800.0]))
        with pytest.raises(SamplerError):
            run_chain(ds, build_time_grid(ds), pr, cfg)

    def test_chain_seeds_independent_and_stable(self):
        a = chain_seeds(0, 4)
        assert a == chain_seeds(0, 4)
        assert len(set(a)) == 4
        assert chain_seeds(0, 2) == a[:2]

    def test_run_chains_and_pool(self, rng):
        ds = generate_dataset(ScenarioSpec(n=20), rng)
        g = build_time_grid(ds)
        pr = PriorSpec.vague(2, g.M)
        cfg = SamplerConfig(n_iterations=1500, burn_in=500, thin=10)
        chains = run_chains(ds, g, pr, cfg, 3)
        assert len(chains) == 3
        assert not np.array_equal(chains[0].draws, chains[1].draws)
        p = pool(chains)
        assert p.n_draws == 3 * cfg.n_retained
        assert p.param_names()[:2] == ["beta_1", "beta_2"]
        assert p.matrix().shape == (p.n_draws, 2 + g.M + 1)


class TestEstimators:
    def test_beta_mean(self):
        assert bayes_estimate_beta(_samples([[0.0, 5.0], [2.0, 5.0]], 1))[0] == 1.0
        s = _samples([[0.3, 1.0]] * 4, 1)
        assert bayes_estimate_beta(s)[0] == 0.3

    def test_rho_mean_of_exponentials(self):
        s = _samples([[0.0], [math.log(2)]], 0)
        assert bayes_estimate_rho(s)[0] == pytest.approx(1.5, rel=1e-15)
        assert bayes_estimate_rho(_samples([[0.0]] * 5, 0))[0] == 1.0

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=50).filter(lambda v: np.ptp(v) > 1e-6))
    def test_jensen_gap(self, vals):
        s = _samples(np.array(vals)[:, None], 0)
        assert bayes_estimate_rho(s)[0] >= math.exp(np.mean(vals))

    def test_baseline_and_mean_function(self):
        g = TimeGrid([0.5, 1.0])
        s = _samples([[0.4, math.log(2), math.log(4)], [0.6, math.log(2), math.log(4)]], 1)
        assert estimate_baseline_mean(s, g, 0.0) == 0.0
        assert estimate_baseline_mean(s, g, 0.75) == pytest.approx(2.0, rel=1e-14)
        assert estimate_mean_function(s, g, [0.0], 0.75) == estimate_baseline_mean(s, g, 0.75)
        t = np.linspace(0.05, 1, 20)
        ratio = estimate_mean_function(s, g, [1.0], t) / estimate_mean_function(s, g, [0.0], t)
        np.testing.assert_allclose(ratio, math.exp(0.5), rtol=1e-14)
        assert np.all(np.diff(estimate_baseline_mean(s, g, t)) >= 0)

    def test_credible_interval_examples(self):
        assert credible_interval(_samples([[2.5]] * 10, 1), 0) == (2.5, 2.5)
        s = _samples(np.arange(1, 101)[:, None], 1)
        lo, hi = credible_interval(s, 0)
        # linear interpolation: position 0.025 * 99 and 0.975 * 99 from the first order statistic
        assert lo == pytest.approx(1 + 0.025 * 99, abs=1e-12)
        assert hi == pytest.approx(1 + 0.975 * 99, abs=1e-12)
        assert (lo, hi) == pytest.approx((3.475, 97.525))

    def test_credible_interval_normal(self):
        z = np.random.default_rng(11).standard_normal(200_000)
        lo, hi = credible_interval(_samples(z[:, None], 1), 0)
        q = stats.norm.ppf(0.975)
        assert lo == pytest.approx(-q, abs=0.03)
        assert hi == pytest.approx(q, abs=0.03)

    def test_credible_interval_bad_level(self):
        with pytest.raises(ValueError):
            credible_interval(_samples([[1.0]], 1), 0, level=1.0)


def test_low_acceptance_warns(caplog):
    # a proposal far too wide for the target leaves the chain stuck
    cfg = SamplerConfig(n_iterations=300, burn_in=100, thin=1, proposal_scale=1e6, seed=1)
    with caplog.at_level("WARNING", logger="panelmean"):
        s = sample_posterior(Posterior(None, None, PriorSpec.vague(1, 1)), cfg)
    assert s.acceptance_rate < 0.01
    assert "acceptance rate" in caplog.text
