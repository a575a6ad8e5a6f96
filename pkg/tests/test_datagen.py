import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, special

from ltsurv.datagen import (FOLLOWUP_LEVELS, FollowUpSpec, SurvivalSample, generate_latent,
                            generate_trial, replicate_rng, round_to_quarter, sample_censoring,
                            sample_event_times)
from ltsurv.distributions import MixtureCureArm, ParametricDistribution, UncuredEffect, apply_effects

WEIBULL = ParametricDistribution.weibull(2, 1)


def design(pi0=0.2, odds=1.0, hr=1.0, pi1=None):
    return apply_effects(MixtureCureArm(pi0, WEIBULL), odds, UncuredEffect.hazard_ratio(hr), pi1)


class TestFollowUp:
    def test_rounding_half_up(self):
        assert round_to_quarter(1.125) == 1.25
        assert round_to_quarter(1.12) == 1.0
        assert round_to_quarter(2.628) == 2.75

    def test_weibull_reference_levels(self):
        taus = [FollowUpSpec.from_control(MixtureCureArm(0.2, WEIBULL), q).tau for q in FOLLOWUP_LEVELS]
        assert taus == [1.25, 1.5, 1.75, 2.25, 2.75]

    @pytest.mark.parametrize("level", FOLLOWUP_LEVELS)
    def test_invariants(self, level):
        spec = FollowUpSpec.from_control(MixtureCureArm(0.0, WEIBULL), level)
        assert spec.tau == math.floor(spec.tau_raw * 4 + 0.5) / 4
        assert spec.tau_accrual == round_to_quarter(0.5 * WEIBULL.quantile(0.75)) == 0.5
        assert spec.tau_accrual < spec.tau
        assert_allclose(spec.tau_raw, WEIBULL.quantile(level), rtol=1e-12)

    def test_accrual_must_precede_tau(self):
        with pytest.raises(ValueError):
            FollowUpSpec.fixed(1.0, 1.0)


class TestEventTimes:
    def test_all_cured(self):
        t = sample_event_times(MixtureCureArm(1.0, WEIBULL), 1, 1000)
        assert np.all(np.isinf(t))

    def test_weibull_mean(self):
        t = sample_event_times(MixtureCureArm(0.0, WEIBULL), 2, 100_000)
        se = t.std() / math.sqrt(t.size)
        assert abs(t.mean() - special.gamma(1.5)) < 3 * se

    def test_cured_fraction(self):
        t = sample_event_times(MixtureCureArm(0.2, WEIBULL), 3, 100_000)
        assert abs(np.isinf(t).mean() - 0.2) < 0.004

    def test_scalar_draw(self):
        assert isinstance(sample_event_times(MixtureCureArm(0.0, WEIBULL), 4), float)


class TestCensoring:
    def test_degenerate_window(self):
        spec = FollowUpSpec.fixed(1.5, 1.5 - 1e-9)
        assert_allclose(sample_censoring(spec, 1, 100), 1.5, atol=1e-8)

    def test_uniform_mean_and_support(self):
        c = sample_censoring(FollowUpSpec.fixed(1.5, 0.5), 5, 100_000)
        assert abs(c.mean() - 1.0) < 0.003
        assert c.min() >= 0.5 and c.max() <= 1.5

    def test_independent_of_event_time(self):
        t, c, _ = generate_latent(design(0.0), 50_000, FollowUpSpec.fixed(2.75, 0.5), 6)
        r = np.corrcoef(t, c)[0, 1]
        assert abs(r) < 3 / math.sqrt(t.size)


class TestGenerateTrial:
    spec = FollowUpSpec.from_control(MixtureCureArm(0.0, WEIBULL), 0.999)

    def test_zero_size_forbidden(self):
        with pytest.raises(ValueError):
            generate_trial(design(), 0, self.spec, 1)

    def test_all_cured_all_censored(self):
        s = generate_trial(design(pi0=1.0), 50, self.spec, 1)
        assert s.event.sum() == 0

    def test_group_balance_and_bounds(self):
        s = generate_trial(design(0.2, 1.5, 0.5), 37, self.spec, 2)
        assert s.n_per_group == (37, 37)
        assert np.all(s.time <= self.spec.tau)

    def test_event_indicator_matches_latent(self):
        t, c, g = generate_latent(design(0.2, 1.5, 0.5), 200, self.spec, 3)
        s = generate_trial(design(0.2, 1.5, 0.5), 200, self.spec, 3)
        assert_array_equal(s.event, (t <= c).astype(int))
        assert_array_equal(s.time, np.minimum(t, c))
        assert np.all(s.event[np.isinf(t)] == 0)

    def test_event_proportion_matches_quadrature(self):
        n = 500
        spec = self.spec
        a, b = spec.tau_accrual, spec.tau

        def g(t):
            return 1.0 if t < a else (b - t) / (b - a)

        p, _ = integrate.quad(lambda t: WEIBULL.density(t) * g(t), 0, b, points=[a], epsabs=1e-12)
        reps = 40
        props = [generate_trial(design(0.0), n, spec, replicate_rng(9, "prop", r)).event.mean()
                 for r in range(reps)]
        se = math.sqrt(p * (1 - p) / (2 * n * reps))
        assert abs(np.mean(props) - p) < 3 * se

    def test_deterministic_streams(self):
        d = design(0.2, 1.5, 0.5)
        s1 = generate_trial(d, 100, self.spec, replicate_rng(7, "cell", 12))
        s2 = generate_trial(d, 100, self.spec, replicate_rng(7, "cell", 12))
        s3 = generate_trial(d, 100, self.spec, replicate_rng(7, "cell", 13))
        assert s1.to_csv() == s2.to_csv()
        assert s1.to_csv() != s3.to_csv()


class TestSampleIO:
    def test_csv_round_trip(self, tmp_path):
        s = generate_trial(design(0.2, 1.5, 0.5), 30, TestGenerateTrial.spec, 4)
        path = tmp_path / "d.csv"
        s.to_csv(path)
        back = SurvivalSample.from_csv(path)
        assert_array_equal(back.time, s.time)
        assert_array_equal(back.event, s.event)
        assert_array_equal(back.group, s.group)
        assert path.read_text().splitlines()[0] == "time,event,group"

    @pytest.mark.parametrize("text,line", [
        ("time,event,group\n1.0,1,0\n-2,0,1\n", 3),
        ("time,event,group\n1.0,2,0\n", 2),
        ("time,event,group\n1.0,1\n", 2),
        ("time,event,group\nabc,1,0\n", 2),
    ])
    def test_bad_rows_name_the_line(self, text, line):
        with pytest.raises(ValueError, match=f"line {line}"):
            SurvivalSample.from_csv(io.StringIO(text))

    def test_comments_skipped(self):
        s = SurvivalSample.from_csv(io.StringIO("# note\ntime,event,group\n1,1,0\n2,0,1\n"))
        assert len(s) == 2

    @given(st.lists(st.tuples(st.floats(0, 100), st.integers(0, 1), st.integers(0, 1)), min_size=1,
                    max_size=30))
    def test_round_trip_property(self, rows):
        t, e, g = map(np.array, zip(*rows))
        s = SurvivalSample(t, e, g)
        back = SurvivalSample.from_csv(io.StringIO(s.to_csv()))
        assert_array_equal(back.time, s.time)

    def test_validation(self):
        with pytest.raises(ValueError):
            SurvivalSample([1.0, np.inf], [1, 0], [0, 1])
        with pytest.raises(ValueError):
            SurvivalSample([1.0], [1], [2])
