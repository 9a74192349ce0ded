import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from curemix import priors as pr
from curemix.model import ModelSpec, Priors
from curemix.posterior import cure_fraction_summary, fit
from curemix.sampler import SamplerConfig
from curemix.simstudy import (ALL_CURVES, MU_TRUE, ReplicationResult, Scenario, ScenarioRun,
                              curve_performance, draw_cure_fractions, generate_dataset,
                              paired_bias_gap, performance_measures, read_scenarios,
                              run_replication, run_scenario, scenario_grid, true_estimands,
                              weibull_rmst, write_performance, write_scenarios)

TINY = SamplerConfig(chains=1, iterations=120, warmup=60)


def logit_normal_mean(mu, sigma):
    f = lambda z: special.expit(mu + sigma * z) * stats.norm.pdf(z)  # noqa: E731
    return integrate.quad(f, -np.inf, np.inf, epsabs=1e-13)[0]


class TestGrid:
    def test_size_and_balance(self):
        grid = scenario_grid()
        assert [s.id for s in grid] == list(range(1, 33))
        assert sum(s.n_per_endpoint == 100 for s in grid) == 16
        assert all(s.tau == 5 for s in grid)
        assert len({(s.latency_prior, s.sd_prior, s.cure_prior, s.n_per_endpoint, s.n_endpoints)
                    for s in grid}) == 32

    def test_numbering(self):
        grid = {s.id: s for s in scenario_grid()}
        assert (grid[1].latency_prior, grid[1].cure_prior) == ("weak", "weak")
        assert (grid[5].latency_prior, grid[5].cure_prior) == ("weak", "informative")
        for i in (18, 26):
            assert (grid[i].latency_prior, grid[i].cure_prior) == ("informative", "weak")
        assert (grid[1].n_per_endpoint, grid[1].n_endpoints) == (10, 3)
        assert (grid[2].n_per_endpoint, grid[2].n_endpoints) == (10, 10)

    def test_roundtrip(self, tmp_path):
        grid = scenario_grid()
        write_scenarios(grid, tmp_path / "g.csv")
        assert read_scenarios(tmp_path / "g.csv") == grid

    def test_latency_truths_alternate(self):
        s = Scenario(1, "weak", "weak", "weak", 10, 10)
        assert s.latency_truth[::2] == ((1.0, 1.0),) * 5
        assert s.latency_truth[1::2] == ((1.0, 4.0),) * 5

    def test_prior_settings(self):
        s = Scenario(1, "informative", "weak", "informative", 10, 3)
        p = s.priors("hierarchical")
        assert p.beta_lambda0_for("E2") == pr.Normal(1.4, math.sqrt(0.002))
        assert p.beta_lambda0_for("E1") == pr.Normal(0.0, math.sqrt(0.01))
        assert p.phi["weibull"] == pr.Gamma(1000.0, 1000.0)
        assert p.beta_pi == pr.Normal(-1.0, 0.01)
        assert p.sigma == pr.LogNormal(0.05, math.sqrt(0.1))
        assert s.priors("separate").beta_pi == pr.Normal(-1.0, 0.6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Scenario(1, "strong", "weak", "weak", 10, 3)


class TestGenerate:
    s = Scenario(1, "weak", "weak", "weak", 50, 3)

    def test_all_cured(self):
        d = generate_dataset(self.s, np.random.default_rng(0), [1.0, 1.0, 1.0])
        assert np.all(d.event == 0) and np.all(d.time == 5.0)

    def test_none_cured(self):
        d = generate_dataset(self.s, np.random.default_rng(0), [0.0, 0.0, 0.0])
        assert np.all(d.event == 1) and np.all(d.time > 0)

    def test_shape(self):
        d = generate_dataset(self.s, np.random.default_rng(0))
        assert len(d) == 150 and d.endpoints == ("E1", "E2", "E3") and d.arms == ("A",)

    def test_latency_truth(self):
        d = generate_dataset(replace(self.s, n_per_endpoint=20_000), np.random.default_rng(1), [0, 0, 0])
        for e, rate in (("E1", 1.0), ("E2", 4.0)):
            t = d.time[d.endpoint_index == d.endpoints.index(e)]
            assert t.mean() == pytest.approx(1 / rate, rel=4 / math.sqrt(t.size))

    def test_sigma_zero_equal_fractions(self):
        s = replace(self.s, sigma_true=0.0)
        pis = draw_cure_fractions(s, np.random.default_rng(0))
        np.testing.assert_allclose(pis, 0.2)

    def test_logit_normal_mean(self):
        s = Scenario(1, "weak", "weak", "weak", 100, 1)
        rng = np.random.default_rng(7)
        R = 10_000
        cured = sum(int(np.sum(generate_dataset(s, rng).event == 0)) for _ in range(R))
        p_hat = cured / (R * 100)
        mean = logit_normal_mean(MU_TRUE, 0.4)
        second = integrate.quad(lambda z: special.expit(MU_TRUE + 0.4 * z) ** 2 * stats.norm.pdf(z),
                                -np.inf, np.inf)[0]
        # between-replication variance of pi plus within-replication binomial noise
        se = math.sqrt((second - mean**2) / R + (mean - second) / (R * 100))
        assert abs(p_hat - mean) < 4 * se

    def test_weibull_rmst(self):
        for k, lam, tau in [(1.0, 1.0, 5.0), (1.0, 4.0, 5.0), (1.7, 0.3, 6.0), (0.6, 2.0, 3.0)]:
            q = integrate.quad(lambda t: math.exp(-lam * t**k), 0, tau, epsabs=1e-13)[0]
            assert weibull_rmst(k, lam, tau) == pytest.approx(q, abs=1e-10)

    def test_true_estimands(self):
        s = Scenario(1, "weak", "weak", "weak", 10, 2)
        t = true_estimands(s, [0.2, 0.5])
        np.testing.assert_allclose(t["rmst"], [0.2 * 5 + 0.8 * (1 - math.exp(-5)),
                                               0.5 * 5 + 0.5 * (1 - math.exp(-20)) / 4])


def _result(rep, est, lo, hi, truth):
    arr = np.array([[est], [lo], [hi]], dtype=float)
    t = np.array([truth], dtype=float)
    return ReplicationResult(9, rep, {"cure_fraction": t, "rmst": t},
                             {("hierarchical", "cure_fraction"): arr})


class TestPerformance:
    def test_perfect(self):
        assert curve_performance([0.2] * 4, [0.1] * 4, [0.3] * 4, 0.2) == (0.0, 0.0, 0.0, 1.0)

    def test_hand_example(self):
        bias, rb, empse, cover = curve_performance([0.1, 0.3], [0, 0], [1, 1], 0.2)
        assert bias == pytest.approx(0.0, abs=1e-15)
        assert empse == pytest.approx(math.sqrt(0.02))
        assert rb == pytest.approx(0.0, abs=1e-14)

    def test_infinite_intervals(self):
        assert curve_performance([5.0, -3.0], [-np.inf] * 2, [np.inf] * 2, 0.2)[3] == 1.0

    def test_zero_truth(self):
        assert math.isnan(curve_performance([0.1, 0.2], [0, 0], [1, 1], 0.0)[1])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            curve_performance([0.1], [0], [1], 0.2)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 0.2), st.floats(0, 1)), min_size=2, max_size=12),
           st.randoms())
    def test_order_invariant(self, reps, r):
        results = [_result(i, e, e - w, e + w, t) for i, (e, w, t) in enumerate(reps)]
        shuffled = list(results)
        r.shuffle(shuffled)
        a = performance_measures(results)
        b = performance_measures(shuffled)
        np.testing.assert_equal([x.row() for x in a], [x.row() for x in b])

    def test_all_row(self):
        res = []
        for rep in range(3):
            arr = np.array([[0.3, 0.1], [0.0, 0.0], [1.0, 1.0]])
            res.append(ReplicationResult(4, rep, {"cure_fraction": np.array([0.2, 0.2])},
                                         {("hierarchical", "cure_fraction"): arr}))
        rows = performance_measures(res)
        assert [r.endpoint for r in rows] == ["E1", "E2", ALL_CURVES]
        assert rows[-1].bias == pytest.approx(0.0, abs=1e-15)
        assert rows[0].bias == pytest.approx(0.1)

    def test_write(self, tmp_path):
        rows = performance_measures([_result(i, 0.2 + 0.01 * i, 0, 1, 0.2) for i in range(3)])
        write_performance(rows, tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "scenario,model,estimand,endpoint,bias,rb,empse,coverage,n_rep,n_fail"
        assert lines[1].startswith("9,hierarchical,cure_fraction,E1,0.01,0.05,0.01,1,3,0")

    def test_paired_gap(self):
        res = []
        rng = np.random.default_rng(0)
        for rep in range(50):
            t = np.array([0.2])
            good = np.array([[0.2 + rng.normal(0, 0.01)], [0], [1]])
            bad = np.array([[0.3 + rng.normal(0, 0.01)], [0], [1]])
            res.append(ReplicationResult(1, rep, {"cure_fraction": t},
                                         {("hierarchical", "cure_fraction"): good,
                                          ("separate", "cure_fraction"): bad}))
        gap, se = paired_bias_gap(res, "cure_fraction", "hierarchical", "separate")
        assert gap == pytest.approx(0.1, abs=0.01)
        assert 0 < se < 0.01


class TestRunner:
    s = Scenario(3, "informative", "informative", "weak", 10, 3)

    def test_deterministic(self):
        a = run_replication(self.s, 0, TINY, seed=5)
        b = run_replication(self.s, 0, TINY, seed=5)
        for key in a.estimates:
            np.testing.assert_array_equal(a.estimates[key], b.estimates[key])
        lo, mean, hi = a.estimates[("hierarchical", "cure_fraction")][[1, 0, 2]]
        assert np.all((lo <= mean) & (mean <= hi))

    def test_failure_injection(self):
        run = run_scenario(self.s, 3, TINY, seed=1, fault_injector=lambda rep: rep == 1)
        assert isinstance(run, ScenarioRun)
        assert len(run) == 2 and run.n_fail == 1 and run.failed_reps == [1]
        assert [r.rep for r in run] == [0, 2]
        rows = performance_measures(run)
        assert all(r.n_fail == 1 and r.n_rep == 2 for r in rows)
        assert len(rows) == 2 * 2 * (3 + 1)

    def test_threads_do_not_change_results(self):
        a = run_scenario(self.s, 2, TINY, seed=2, threads=1)
        b = run_scenario(self.s, 2, TINY, seed=2, threads=2)
        for ra, rb in zip(a, b):
            for key in ra.estimates:
                np.testing.assert_array_equal(ra.estimates[key], rb.estimates[key])

    def test_needs_reps(self):
        with pytest.raises(ValueError):
            run_scenario(self.s, 0, TINY)


@pytest.mark.slow
def test_coverage_correctly_specified():
    """Priors matching the data-generating process give nominal cure-fraction coverage."""
    s = Scenario(0, "informative", "informative", "informative", 100, 3)
    priors = Priors(beta_lambda0_by_endpoint={e: pr.Normal(math.log(rate), 0.05)
                                              for e, (_, rate) in zip(s.endpoints, s.latency_truth)},
                    phi={"weibull": pr.Gamma(1000.0, 1000.0)},
                    beta_pi=pr.Normal(MU_TRUE, 0.01), sigma=pr.LogNormal(math.log(0.4), 0.01))
    spec = ModelSpec(s.endpoints, ("A",), ("weibull",) * 3, "hierarchical", priors, covariates=False)
    cfg = SamplerConfig(chains=2, iterations=500, warmup=200)
    hits = []
    for rep in range(200):
        root = np.random.SeedSequence([77, rep])
        data_seq, fit_seq = root.spawn(2)
        rng = np.random.default_rng(data_seq)
        pis = draw_cure_fractions(s, rng)
        data = generate_dataset(s, rng, pis)
        rows = cure_fraction_summary(fit(spec, data, None, cfg, seed_seq=fit_seq, pointwise=False).draws, spec)
        cells = [r for r in rows if r.endpoint != "global"]
        hits.append([r.lower95 <= p <= r.upper95 for r, p in zip(cells, pis)])
    coverage = float(np.mean(hits))
    print(f"cure-fraction coverage, correctly specified, 200 reps: {coverage:.3f}")
    assert 0.90 <= coverage <= 0.995
