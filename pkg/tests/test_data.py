import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curemix.data import (SchemaError, SubjectRecord, TrialDataset, ValidationError,
                          apply_datacut, kaplan_meier, km_by_cell, load_dataset, write_dataset)

from conftest import write_rows


def product_limit(times, events):
    """Plain-loop product-limit oracle: {event time: survival}."""
    pairs = sorted(zip(times, events))
    s = 1.0
    out = {}
    for t in sorted({t for t, d in pairs if d == 1}):
        n = sum(1 for u, _ in pairs if u >= t)
        d = sum(1 for u, e in pairs if u == t and e == 1)
        s *= 1.0 - d / n
        out[t] = s
    return out


class TestLoad:
    def test_two_rows(self, tmp_path):
        p = write_rows(tmp_path / "d.csv", ["a,OS,X,3.5,1,60,female,GBR",
                                            "b,OS,X,7.0,0,71,male,FRA"])
        data = load_dataset(p)
        assert len(data) == 2
        assert data.covariate_means["age"] == pytest.approx(65.5)
        assert data.endpoints == ("OS",)
        np.testing.assert_array_equal(data.event, [1, 0])

    def test_zero_time_cites_row(self, tmp_path):
        p = write_rows(tmp_path / "d.csv", ["a,OS,X,3.5,1,60,female,GBR",
                                            "b,OS,X,2.0,1,60,female,GBR",
                                            "c,OS,X,0,1,60,female,GBR"])
        with pytest.raises(ValidationError, match="row 3"):
            load_dataset(p)

    def test_event_two(self, tmp_path):
        p = write_rows(tmp_path / "d.csv", ["a,OS,X,3.5,2,60,female,GBR"])
        with pytest.raises(ValidationError, match="event"):
            load_dataset(p)

    def test_missing_column_named(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,endpoint,arm,time,event,sex,country\na,OS,X,1,1,female,GBR\n")
        with pytest.raises(SchemaError, match="age"):
            load_dataset(p)

    @pytest.mark.parametrize("field,value", [("sex", "other"), ("country", "gb1")])
    def test_bad_codes(self, tmp_path, field, value):
        row = {"sex": "female", "country": "GBR"}
        row[field] = value
        p = write_rows(tmp_path / "d.csv", [f"a,OS,X,1,1,60,{row['sex']},{row['country']}"])
        with pytest.raises(ValidationError):
            load_dataset(p)

    def test_roundtrip(self, tmp_path, rng):
        from conftest import random_dataset

        data = random_dataset(rng, 20)
        write_dataset(data, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        assert back.records == data.records


def _dataset(times, events):
    recs = [SubjectRecord(f"s{i}", "OS", "X", float(t), int(d), 50.0, "male", "GBR")
            for i, (t, d) in enumerate(zip(times, events))]
    return TrialDataset(tuple(recs))


class TestDatacut:
    def test_paper_rule(self):
        out = apply_datacut(_dataset([40.0], [1]), 12)
        assert (out.records[0].time, out.records[0].event) == (12.0, 0)

    @pytest.mark.parametrize("cut", [math.inf, 60.0])
    def test_identity(self, cut):
        data = _dataset([1.0, 5.0, 60.0], [1, 0, 1])
        assert apply_datacut(data, cut).records == data.records

    def test_count(self, rng):
        times = np.concatenate([rng.uniform(1, 29.9, 63), rng.uniform(30.01, 80, 37)])
        rng.shuffle(times)
        out = apply_datacut(_dataset(times, [1] * 100), 30)
        expected = int(np.sum(times > 30))
        assert expected == 37
        assert sum(1 for r in out.records if r.time == 30 and r.event == 0) == expected
        assert len(out) == 100

    @pytest.mark.parametrize("cut", [0, -1])
    def test_nonpositive(self, cut):
        with pytest.raises(ValueError):
            apply_datacut(_dataset([1.0], [1]), cut)

    @given(st.lists(st.floats(0.1, 100), min_size=1, max_size=30),
           st.floats(0.5, 120), st.floats(0.5, 120))
    def test_composition(self, times, c1, c2):
        data = _dataset(times, [1] * len(times))
        once = apply_datacut(data, c1)
        assert apply_datacut(once, c1).records == once.records
        lo = min(c1, c2)
        assert apply_datacut(apply_datacut(data, max(c1, c2)), lo).records == \
            apply_datacut(data, lo).records


class TestKaplanMeier:
    def test_all_events(self):
        km = kaplan_meier([1, 2, 3, 4], [1, 1, 1, 1])
        np.testing.assert_allclose(km.survival[1:], [0.75, 0.5, 0.25, 0.0])
        assert km(0) == 1.0

    def test_all_censored(self):
        km = kaplan_meier([1, 2, 3], [0, 0, 0])
        np.testing.assert_array_equal(km([0, 1, 2, 3, 10]), 1.0)

    def test_censored_middle(self):
        # risk sets 3, 2 (censored at 2), 1: the last subject's event empties the curve
        km = kaplan_meier([1, 2, 3], [1, 0, 1])
        oracle = product_limit([1, 2, 3], [1, 0, 1])
        assert km(1)[()] == pytest.approx(2 / 3)
        assert km(3)[()] == pytest.approx(oracle[3]) == 0.0

    def test_tie_censored_stays_at_risk(self):
        km = kaplan_meier([2, 2, 5], [1, 0, 1])
        assert km(2)[()] == pytest.approx(2 / 3)
        np.testing.assert_array_equal(km.n_risk, [3, 3, 1])

    def test_greenwood(self):
        t = [1, 2, 2, 3, 4, 5, 6, 6, 8, 9]
        d = [1, 1, 0, 1, 0, 1, 1, 1, 0, 0]
        km = kaplan_meier(t, d)
        # Greenwood by hand at t=3: risk sets 10, 9, 7 with one event each
        var = 1 / (10 * 9) + 1 / (9 * 8) + 1 / (7 * 6)
        s = 0.9 * 8 / 9 * 6 / 7
        half = 1.959963984540054 * math.sqrt(var)
        i = list(km.times).index(3)
        assert km.survival[i] == pytest.approx(s)
        assert km.lower95[i] == pytest.approx(s * math.exp(-half))
        assert km.upper95[i] == pytest.approx(min(1.0, s * math.exp(half)))

    def test_errors(self):
        with pytest.raises(ValueError):
            kaplan_meier([], [])
        with pytest.raises(ValueError):
            kaplan_meier([1, 2], [1])

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.integers(1, 20), st.integers(0, 1)), min_size=1, max_size=40),
           st.randoms())
    def test_properties(self, obs, r):
        times, events = zip(*obs)
        km = kaplan_meier(times, events)
        assert km.survival[0] == 1.0
        assert np.all(np.diff(km.survival) <= 0)
        assert np.all((km.lower95 <= km.survival + 1e-12) & (km.survival <= km.upper95 + 1e-12))
        assert np.all((km.lower95 >= 0) & (km.upper95 <= 1))
        oracle = product_limit(times, events)
        for t, s in oracle.items():
            assert km(t)[()] == pytest.approx(s)
        shuffled = list(obs)
        r.shuffle(shuffled)
        km2 = kaplan_meier(*zip(*shuffled))
        np.testing.assert_array_equal(km.survival, km2.survival)

    @given(st.lists(st.floats(0.01, 50), min_size=1, max_size=40, unique=True))
    def test_no_censoring_is_ecdf(self, times):
        km = kaplan_meier(times, [1] * len(times))
        t = np.sort(times)
        ecdf = np.arange(1, t.size + 1) / t.size
        np.testing.assert_allclose(km(t), 1.0 - ecdf, atol=1e-12)


def test_km_by_cell_marks_empty():
    recs = (SubjectRecord("a", "OS", "X", 1.0, 1, 50.0, "male", "GBR"),)
    data = TrialDataset(recs, ("OS", "PFS"), ("X",))
    cells = {(a, e): c for a, e, c in km_by_cell(data)}
    assert cells[("X", "PFS")] is None
    assert cells[("X", "OS")] is not None
