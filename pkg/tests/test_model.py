import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curemix import priors as pr
from curemix.data import SubjectRecord, TrialDataset
from curemix.dists import FAMILIES
from curemix.lifetable import BackgroundCurve
from curemix.model import (POOLINGS, CureModel, Layout, LogPrior, ModelError, ModelSpec, Priors,
                           initialize, log_likelihood, log_posterior_and_gradient, log_prior)

from conftest import random_dataset


def fd_gradient(f, x, rel=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def one_record(t, event, family="exponential", pooling="separate", covariates=False):
    data = TrialDataset((SubjectRecord("r1", "OS", "A", t, event, 60.0, "male", "GBR"),))
    spec = ModelSpec.for_data(data, family, pooling, covariates=covariates)
    return data, spec


@pytest.fixture
def data(rng):
    return random_dataset(rng, 80)


class TestExamples:
    def test_single_censored(self):
        data, spec = one_record(2.0, 0)
        x = Layout(spec).pack({"logit_pi": [[0.0]], "beta0": [[0.0]]})
        assert log_likelihood(spec, data, None, x) == pytest.approx(math.log(0.5 + 0.5 * math.exp(-2)))
        assert log_likelihood(spec, data, None, x) == pytest.approx(-0.566219, abs=1e-6)

    def test_single_event(self):
        data, spec = one_record(2.0, 1)
        x = Layout(spec).pack({"logit_pi": [[0.0]], "beta0": [[0.0]]})
        assert log_likelihood(spec, data, None, x) == pytest.approx(math.log(0.5 * math.exp(-2)))

    def test_pi_zero_collapses(self):
        data, spec = one_record(1.5, 1, "weibull")
        m = CureModel(spec, data)
        x = Layout(spec).pack({"logit_pi": [[-np.inf]], "beta0": [[-0.3]], "log_phi": [0.4]})
        k, lam = math.exp(0.4), math.exp(-0.3)
        expected = math.log(k * lam * 1.5 ** (k - 1)) - lam * 1.5**k
        assert m.log_likelihood(x) == pytest.approx(expected, rel=1e-12)

    def test_pi_one_event_impossible(self):
        data, spec = one_record(1.5, 1)
        x = Layout(spec).pack({"logit_pi": [[np.inf]], "beta0": [[0.0]]})
        assert CureModel(spec, data).log_likelihood(x) == -np.inf

    def test_pi_one_event_with_background(self, tables):
        data, spec = one_record(24.0, 1)
        bg = BackgroundCurve(data, tables)
        x = Layout(spec).pack({"logit_pi": [[40.0]], "beta0": [[0.0]]})
        expected = bg.log_survival[0] + math.log(bg.hazard[0])
        assert CureModel(spec, data, bg).log_likelihood(x) == pytest.approx(expected, rel=1e-12)

    def test_log_prior_at_mean(self):
        spec = ModelSpec(("OS",), ("A",), ("exponential",), "pooled", covariates=False)
        lp = LogPrior(spec)
        x = Layout(spec).pack({"beta_pi": [-0.1], "beta0": [[-3.0]]})
        assert lp.terms(x)["incidence"] == pytest.approx(-math.log(0.2 * math.sqrt(2 * math.pi)), rel=1e-14)
        assert lp.terms(x)["incidence"] == pytest.approx(0.690499, abs=1e-6)

    def test_pooled_has_no_z(self):
        spec = ModelSpec(("OS", "PFS"), ("A", "B"), ("weibull", "exponential"), "pooled")
        names = Layout(spec).names
        assert not any(n.startswith(("z[", "nu[", "log_sigma[")) for n in names)
        assert names[:2] == ["beta_pi[A]", "beta_pi[B]"]


class TestLayout:
    @pytest.mark.parametrize("pooling", POOLINGS)
    def test_roundtrip(self, pooling, rng):
        spec = ModelSpec(("OS", "PFS", "TTP"), ("A", "B"), ("weibull", "exponential", "gompertz"), pooling)
        lay = Layout(spec)
        x = rng.normal(size=lay.size)
        np.testing.assert_array_equal(lay.pack(lay.unpack(x)), x)
        assert len(lay.names) == lay.size == len(set(lay.names))

    def test_constrain_vectorised(self, rng):
        spec = ModelSpec(("OS", "PFS"), ("A",), ("exponential", "weibull"), "hierarchical")
        lay = Layout(spec)
        xs = rng.normal(size=(7, 3, lay.size))
        c = lay.constrain(xs)
        assert c["pi"].shape == (7, 3, 1, 2)
        assert np.all(np.isnan(c["phi"][..., 0])) and np.all(c["phi"][..., 1] > 0)
        one = lay.constrain(xs[2, 1])
        np.testing.assert_allclose(c["pi"][2, 1], one["pi"])

    def test_mismatch(self, data):
        spec = ModelSpec(("OS",), ("A", "B"), ("weibull",))
        with pytest.raises(ValueError):
            CureModel(spec, data)

    @pytest.mark.parametrize("kw", [dict(pooling="partial"), dict(families=("gamma", "weibull")),
                                    dict(families=("weibull",))])
    def test_bad_spec(self, kw):
        base = dict(endpoints=("OS", "PFS"), arms=("A",), families=("weibull", "weibull"))
        base.update(kw)
        with pytest.raises(ValueError):
            ModelSpec(**base)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("pooling", POOLINGS)
def test_gradient_matches_finite_differences(family, pooling, data, tables, rng):
    spec = ModelSpec.for_data(data, family, pooling, Priors(sigma=pr.pc_prior(0.18, 0.01)))
    model = CureModel(spec, data, BackgroundCurve(data, tables))
    for _ in range(3):
        x = 0.5 * initialize(spec, data, rng)
        lp, g = model(x)
        assert np.isfinite(lp)
        fd = fd_gradient(lambda y: model.log_density(y), x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)
        assert lp == pytest.approx(model.log_density(x), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(FAMILIES))
def test_survival_bounds(seed, family):
    # censored contributions are log S; S_b pi <= S <= S_b
    rng = np.random.default_rng(seed)
    recs = tuple(SubjectRecord(f"s{i}", "OS", "A", float(rng.uniform(0.1, 80)), 0, 50.0, "male", "GBR")
                 for i in range(20))
    d = TrialDataset(recs)
    spec = ModelSpec.for_data(d, family, "separate", covariates=False)
    lay = Layout(spec)
    x = rng.normal(size=lay.size)
    ll = CureModel(spec, d).pointwise_loglik(x)
    log_pi = -np.logaddexp(0, -x[lay.slices["logit_pi"]])
    assert np.all(ll <= 1e-12)
    assert np.all(ll >= log_pi - 1e-12)


def test_separate_factorises(data, tables, rng):
    spec = ModelSpec.for_data(data, {"OS": "weibull", "PFS": "lognormal"}, "separate")
    bg = BackgroundCurve(data, tables)
    model = CureModel(spec, data, bg)
    x = 0.5 * initialize(spec, data, rng)
    p = model.layout.unpack(x)
    total = 0.0
    for j, e in enumerate(spec.endpoints):
        sub = TrialDataset(tuple(r for r in data.records if r.endpoint == e), (e,), data.arms)
        s = ModelSpec((e,), spec.arms, (spec.families[j],), "separate", spec.priors, spec.age_center)
        xs = Layout(s).pack({"logit_pi": p["logit_pi"][:, [j]], "beta0": p["beta0"][:, [j]],
                             "beta_age": p["beta_age"][[j]], "log_phi": p["log_phi"][[j]]})
        total += CureModel(s, sub, BackgroundCurve(sub, tables)).log_density(xs)
    assert model.log_density(x) == pytest.approx(total, abs=1e-10)


def test_pooling_limit(data, rng):
    priors = Priors(sigma=pr.HalfNormal(1.0))
    hier = CureModel(ModelSpec.for_data(data, "weibull", "hierarchical", priors), data)
    pool = CureModel(ModelSpec.for_data(data, "weibull", "pooled", priors), data)
    xp = 0.5 * initialize(pool.spec, data, rng)
    pp = pool.layout.unpack(xp)
    K, J = hier.spec.n_arms, hier.spec.n_endpoints
    xh = hier.layout.pack({"nu": pp["beta_pi"], "log_sigma": np.full(K, math.log(1e-8)),
                           "z": rng.normal(size=(K, J)), "beta0": pp["beta0"],
                           "beta_age": pp["beta_age"], "log_phi": pp["log_phi"]})
    th, tp = hier.log_prior_terms(xh), pool.log_prior_terms(xp)
    lh = hier.log_likelihood(xh) + th["incidence"] + th["latency"]
    lpool = pool.log_likelihood(xp) + tp["incidence"] + tp["latency"]
    assert tp["hyper"] == 0.0
    assert abs(lh - lpool) < 1e-4


@pytest.mark.parametrize("pooling", POOLINGS)
def test_prior_gradient_zero_at_mode(pooling):
    spec = ModelSpec(("OS", "PFS"), ("A", "B"), ("weibull", "exponential"), pooling,
                     Priors(sigma=pr.HalfNormal(2.5)))
    lay = Layout(spec)
    blocks = {"logit_pi": np.full((2, 2), -0.1), "beta_pi": np.full(2, -0.1), "nu": np.full(2, -0.1),
              "log_sigma": np.full(2, math.log(2.5)), "z": np.zeros((2, 2)),
              "beta0": np.full((2, 2), -3.0), "beta_age": np.zeros(2), "log_phi": [math.log(1.0 / 1.0)]}
    _, g = LogPrior(spec).evaluate(lay.pack(blocks), grad=True)
    np.testing.assert_allclose(g, 0.0, atol=1e-10)


class TestInitialize:
    def test_reproducible(self, data):
        spec = ModelSpec.for_data(data, "gompertz")
        a = initialize(spec, data, np.random.default_rng(8))
        b = initialize(spec, data, np.random.default_rng(8))
        np.testing.assert_array_equal(a, b)

    def test_support(self, data):
        spec = ModelSpec.for_data(data, "weibull", "hierarchical", Priors(sigma=pr.pc_prior(0.08, 0.01)))
        lay = Layout(spec)
        rng = np.random.default_rng(2)
        for _ in range(200):
            c = lay.constrain(initialize(spec, data, rng))
            assert np.all((c["pi"] > 0) & (c["pi"] < 1))
            assert np.all(c["sigma"] >= 1e-3)

    def test_prior_mean(self, data):
        spec = ModelSpec.for_data(data, "weibull", "pooled")
        lay = Layout(spec)
        rng = np.random.default_rng(21)
        draws = np.array([initialize(spec, data, rng)[lay.slices["beta_pi"]][0] for _ in range(1000)])
        assert abs(draws.mean() + 0.1) < 3 * 0.2 / math.sqrt(1000)


def test_check_names_record(data):
    spec = ModelSpec.for_data(data, "weibull", "separate")
    lay = Layout(spec)
    x = initialize(spec, data, np.random.default_rng(0))
    x[lay.slices["log_phi"]] = np.nan
    with pytest.raises(ModelError, match=r"record 's\d+'.*latency"):
        log_likelihood(spec, data, None, x)


def test_nonfinite_posterior_is_minus_inf(data):
    spec = ModelSpec.for_data(data, "weibull", "separate")
    x = initialize(spec, data, np.random.default_rng(0))
    x[0] = np.nan
    lp, g = log_posterior_and_gradient(spec, data, None, x)
    assert lp == -np.inf and np.all(g == 0)


def test_functional_prior_matches_model(data, rng):
    spec = ModelSpec.for_data(data, "loglogistic", "hierarchical")
    x = initialize(spec, data, rng)
    assert log_prior(spec, x) == pytest.approx(CureModel(spec, data).log_prior(x))
