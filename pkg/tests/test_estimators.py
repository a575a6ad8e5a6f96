import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ltsurv.datagen import SurvivalSample
from ltsurv.estimators import build_risk_table, kaplan_meier

from conftest import random_sample
from oracles import product_limit


class TestRiskTable:
    def test_single_record(self):
        t = build_risk_table(SurvivalSample([1.0], [1], [0]))
        assert_array_equal(t.time, [1.0])
        assert (t.d0[0], t.d1[0], t.y0[0], t.y1[0]) == (1, 0, 1, 0)

    def test_censoring_at_event_time_counts_at_risk(self):
        t = build_risk_table(SurvivalSample([1.0, 1.0], [1, 0], [0, 1]))
        assert (t.d0[0], t.y0[0], t.y1[0]) == (1, 1, 1)

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            build_risk_table(SurvivalSample([], [], []))

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_recount(self, seed):
        s = random_sample(np.random.default_rng(seed), 20, tie_grid=6 if seed % 2 else None, min_n=20)
        table = build_risk_table(s)
        for k, tk in enumerate(table.time):
            for g, (d, y) in enumerate(((table.d0, table.y0), (table.d1, table.y1))):
                at_risk = sum(1 for ti, gi in zip(s.time, s.group) if gi == g and ti >= tk)
                dead = sum(1 for ti, ei, gi in zip(s.time, s.event, s.group)
                           if gi == g and ti == tk and ei == 1)
                assert (d[k], y[k]) == (dead, at_risk)

    @given(st.integers(0, 10_000))
    def test_invariants(self, seed):
        table = build_risk_table(random_sample(np.random.default_rng(seed), 30, tie_grid=8))
        for d, y in ((table.d0, table.y0), (table.d1, table.y1)):
            assert np.all(np.diff(y) <= 0)
            assert np.all(d <= y)


class TestKaplanMeier:
    def test_no_events(self):
        km = kaplan_meier(SurvivalSample([1.0, 2.0, 3.0], [0, 0, 0], [0, 1, 0]))
        assert_allclose(km([0.5, 2.5, 10.0]), 1.0)

    def test_four_distinct_events(self):
        km = kaplan_meier(SurvivalSample([1, 2, 3, 4], [1, 1, 1, 1], [0, 0, 1, 1]))
        assert_allclose(km.survival, [0.75, 0.5, 0.25, 0.0])

    def test_mixed_sample_against_product_limit(self):
        time = [0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.5, 4.0]
        event = [1, 1, 0, 1, 0, 1, 1, 0, 1, 0]
        km = kaplan_meier(SurvivalSample(time, event, [0, 1] * 5))
        ref = product_limit(time, event)
        assert_allclose(km.time, [t for t, _ in ref])
        assert_allclose(km.survival, [s for _, s in ref], rtol=1e-14)
        # events at 0.5, 1, 1.5, 2, 2.5, 3.5 with 10, 9, 7, 6, 4, 2 at risk
        hand = (9 / 10) * (8 / 9) * (6 / 7) * (5 / 6) * (3 / 4) * (1 / 2)
        assert_allclose(km.survival[-1], hand, rtol=1e-14)

    def test_uncensored_equals_empirical(self):
        rng = np.random.default_rng(3)
        t = rng.exponential(size=40)
        km = kaplan_meier(SurvivalSample(t, np.ones(40), np.arange(40) % 2))
        grid = np.linspace(0, t.max() + 1, 200)
        assert_allclose(km(grid), [(t > x).mean() for x in grid], atol=1e-14)

    @given(st.integers(0, 10_000))
    def test_pooled_invariant_under_relabel(self, seed):
        s = random_sample(np.random.default_rng(seed), 30, tie_grid=5)
        a, b = kaplan_meier(s), kaplan_meier(s.swapped())
        assert_allclose(a.survival, b.survival)

    @given(st.integers(0, 10_000))
    def test_shape(self, seed):
        s = random_sample(np.random.default_rng(seed), 30)
        km = kaplan_meier(s)
        assert km(0.0) == 1.0
        assert np.all(np.diff(km.survival) <= 0)
        assert set(km.time) <= set(s.time[s.event == 1])

    def test_left_limit_matches_risk_table(self):
        s = random_sample(np.random.default_rng(8), 20, tie_grid=5)
        table = build_risk_table(s)
        assert_allclose(kaplan_meier(s).left_limit(table.time), table.pooled_km_left(), rtol=1e-14)

    def test_per_group_curve(self):
        s = SurvivalSample([1, 2, 3, 4], [1, 1, 1, 1], [0, 1, 0, 1])
        assert_allclose(kaplan_meier(s, group=0).survival, [0.5, 0.0])

    def test_csv(self):
        text = kaplan_meier(SurvivalSample([1, 2], [1, 0], [0, 1])).to_csv()
        assert text.splitlines()[0].startswith("time")
