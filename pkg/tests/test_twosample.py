import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ltsurv.datagen import FollowUpSpec, SurvivalSample, generate_trial, replicate_rng
from ltsurv.distributions import MixtureCureArm, ParametricDistribution, UncuredEffect, apply_effects
from ltsurv.estimators import build_risk_table
from ltsurv.results import Method, TestResult
from ltsurv.twosample import (EARLY, LATE, FHWeights, OracleRequired, TwoStageConfig, adaptive_yp,
                              inverse_km_weights, log_rank, oracle_log_hazard_ratio, oracle_log_rank,
                              optimal_log_rank, run_test, two_stage, weighted_log_rank)

from conftest import random_sample
from oracles import brute_force_weighted_logrank

WEIBULL = ParametricDistribution.weibull(2, 1)


def design(pi0=0.0, odds=1.0, hr=1.0, pi1=None):
    return apply_effects(MixtureCureArm(pi0, WEIBULL), odds, UncuredEffect.hazard_ratio(hr), pi1)


def trial(d, n, seed, level=0.999):
    spec = FollowUpSpec.from_control(d.control, level)
    return generate_trial(d, n, spec, replicate_rng(seed, "twosample-tests", 0))


class TestWeightedLogRankOracle:
    @pytest.mark.parametrize("seed", range(100))
    def test_log_rank_matches_tabulation(self, seed):
        s = random_sample(np.random.default_rng(seed), 20, tie_grid=7 if seed % 3 == 0 else None)
        res = log_rank(s)
        u, v = brute_force_weighted_logrank(s.time, s.event, s.group)
        assert_allclose(res.score, u, atol=1e-10)
        assert_allclose(res.variance, v, atol=1e-10)

    @pytest.mark.parametrize("rho,gamma", [(1, 0), (0, 1), (1, 1), (0.5, 2)])
    @pytest.mark.parametrize("seed", range(10))
    def test_fleming_harrington_matches_tabulation(self, seed, rho, gamma):
        s = random_sample(np.random.default_rng(1000 + seed), 20, tie_grid=5 if seed % 2 else None)
        res = weighted_log_rank(s, FHWeights(rho, gamma))
        u, v = brute_force_weighted_logrank(s.time, s.event, s.group,
                                            lambda km: km ** rho * (1 - km) ** gamma)
        assert_allclose(res.score, u, atol=1e-10)
        assert_allclose(res.variance, v, atol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_inverse_km_matches_tabulation(self, seed):
        s = random_sample(np.random.default_rng(2000 + seed), 20)
        res = optimal_log_rank(s)
        u, v = brute_force_weighted_logrank(s.time, s.event, s.group, lambda km: 1 / km)
        assert_allclose(res.score, u, atol=1e-10)
        assert_allclose(res.variance, v, atol=1e-10)

    def test_hand_example(self):
        # t=1: 2 at risk per arm, one control death -> E1 = 1/2, V = 1/4 * (3/3) = 1/4
        s = SurvivalSample([1, 2, 3, 4], [1, 1, 1, 0], [0, 0, 1, 1])
        res = log_rank(s)
        # t=2: Y0=1, Y1=2, d=1 -> E1 = 2/3 ; t=3: Y1=2, d1=1 -> E1 = 1
        assert_allclose(res.score, (0 - 0.5) + (0 - 2 / 3) + (1 - 1))
        assert_allclose(res.variance, 0.25 + 2 / 9 + 0.0)

    def test_log_rank_is_fh_zero_zero(self):
        s = random_sample(np.random.default_rng(5), 20, tie_grid=4, min_n=15)
        a, b = log_rank(s), weighted_log_rank(s, FHWeights(0, 0))
        assert_allclose((a.statistic, a.p_value), (b.statistic, b.p_value), rtol=1e-14)


class TestWeightedLogRankProperties:
    @given(st.integers(0, 10_000))
    def test_swap_negates_score(self, seed):
        s = random_sample(np.random.default_rng(seed), 20, tie_grid=6)
        for w in (None, EARLY, LATE):
            a, b = weighted_log_rank(s, w), weighted_log_rank(s.swapped(), w)
            assert_allclose(a.score, -b.score, atol=1e-12)
            assert_allclose(a.variance, b.variance, rtol=1e-12)
            if not a.failed:
                assert_allclose(a.p_value, b.p_value, rtol=1e-10)

    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_z_invariant_to_weight_scale(self, seed, c):
        s = random_sample(np.random.default_rng(seed), 20)
        table = build_risk_table(s)
        w = np.random.default_rng(seed).random(len(table)) + 0.1
        a = weighted_log_rank(s, w)
        b = weighted_log_rank(s, c * w)
        if not a.failed:
            assert_allclose(a.statistic, b.statistic, rtol=1e-9)

    @given(st.integers(0, 10_000))
    def test_p_value_in_unit_interval(self, seed):
        res = log_rank(random_sample(np.random.default_rng(seed), 20, tie_grid=3))
        assert res.failed or 0.0 <= res.p_value <= 1.0

    def test_fh_weight_at_first_event(self):
        s = random_sample(np.random.default_rng(1), 20, min_n=10)
        left = build_risk_table(s).pooled_km_left()
        assert EARLY(left)[0] == 1.0
        assert LATE(left)[0] == 0.0

    def test_negative_fh_parameters_rejected(self):
        with pytest.raises(ValueError):
            FHWeights(-1, 0)

    def test_zero_weights_reported_as_failure(self):
        s = SurvivalSample([1, 2, 3, 4], [1, 1, 1, 1], [0, 1, 0, 1])
        res = weighted_log_rank(s, np.zeros(4))
        assert res.failed and "variance" in res.failure
        assert math.isnan(res.p_value)

    def test_misaligned_weights_raise(self):
        s = SurvivalSample([1, 2, 3, 4], [1, 1, 1, 1], [0, 1, 0, 1])
        with pytest.raises(ValueError):
            weighted_log_rank(s, np.ones(3))

    def test_no_events_fails(self):
        res = log_rank(SurvivalSample([1, 2], [0, 0], [0, 1]))
        assert res.failed and "no events" in res.failure

    def test_one_group_fails(self):
        assert log_rank(SurvivalSample([1, 2], [1, 1], [0, 0])).failed

    def test_events_in_one_group_only_still_valid(self):
        res = log_rank(SurvivalSample([1, 2, 3, 4], [1, 1, 0, 0], [0, 0, 1, 1]))
        assert not res.failed and res.auxiliary["events"] == [2, 0]

    def test_direction_convention(self):
        s = trial(design(hr=0.5), 200, 1)
        assert log_rank(s).statistic < 0


class TestOptimalWeights:
    def test_inverse_km_weight_values(self):
        s = SurvivalSample([1, 2, 3, 4], [1, 1, 1, 1], [0, 1, 0, 1])
        assert_allclose(inverse_km_weights(build_risk_table(s)), [1, 4 / 3, 2, 4])

    def test_aux_records_weight_form(self):
        res = optimal_log_rank(random_sample(np.random.default_rng(3), 20, min_n=10))
        assert res.method is Method.OPTIMAL_LR
        assert (res.auxiliary["rho"], res.auxiliary["gamma"]) == (-1.0, 0.0)

    def test_oracle_under_ph_equals_log_rank(self):
        d = design(hr=0.6)
        s = trial(d, 80, 2)
        assert_allclose(oracle_log_rank(s, d).p_value, log_rank(s).p_value, rtol=1e-12)

    def test_oracle_null_falls_back_to_log_rank(self):
        d = design()
        s = trial(d, 60, 3)
        res = oracle_log_rank(s, d)
        assert_allclose(res.statistic, log_rank(s).statistic)
        assert "fallback" in res.auxiliary

    def test_oracle_weights_from_mixture_hazards(self):
        d = design(0.2, 1.5, 0.5)
        t = np.array([0.3, 1.0, 2.0])
        c, tr = d.control, d.treatment
        expected = []
        for x in t:
            h = []
            for arm in (tr, c):
                su = math.exp(-x ** 2 * (arm.effect.value if arm is tr else 1.0))
                f_u = (2 * x * (arm.effect.value if arm is tr else 1.0)) * su
                s = arm.cure_fraction + (1 - arm.cure_fraction) * su
                h.append((1 - arm.cure_fraction) * f_u / s)
            expected.append(math.log(h[0] / h[1]))
        assert_allclose(oracle_log_hazard_ratio(d, t), expected, rtol=1e-10)

    def test_oracle_needs_design(self):
        s = random_sample(np.random.default_rng(4), 20)
        with pytest.raises(OracleRequired):
            run_test(s, "OptimalLR", optimal_weights="oracle")
        with pytest.raises(ValueError):
            run_test(s, "OptimalLR", optimal_weights="bogus")


class TestAdaptiveYP:
    def test_aux_and_range(self):
        res = adaptive_yp(trial(design(0.2, 1.5, 0.5), 100, 5))
        assert not res.failed
        assert res.auxiliary["df"] == 2
        assert res.auxiliary["theta_E"] > 0 and res.auxiliary["theta_L"] > 0
        assert 0 <= res.p_value <= 1 and res.statistic >= 0

    def test_too_few_events_fails(self):
        res = adaptive_yp(SurvivalSample([1, 2, 3, 4], [1, 1, 1, 0], [0, 0, 1, 1]))
        assert res.failed and "at least 2 events" in res.failure

    def test_ph_data_gives_similar_ratios(self):
        s = trial(design(hr=0.5), 500, 6)
        aux = adaptive_yp(s).auxiliary
        assert 0.3 < aux["theta_E"] < 0.8 and 0.3 < aux["theta_L"] < 0.8

    def test_power_under_ph(self):
        d = design(hr=0.5)
        spec = FollowUpSpec.from_control(d.control, 0.999)
        rej = [adaptive_yp(generate_trial(d, 100, spec, replicate_rng(7, "yp-ph", r))).rejects()
               for r in range(200)]
        assert np.mean(rej) > 0.7

    def test_swapped_arms_reach_same_decision(self):
        # the model is anchored on the control KM curve, so only the decision is compared
        s = trial(design(0.2, 1.5, 0.5), 100, 8)
        assert adaptive_yp(s).rejects() and adaptive_yp(s.swapped()).rejects()


class TestTwoStage:
    def test_alpha_split(self):
        cfg = TwoStageConfig()
        assert_allclose(cfg.alpha1 + (1 - cfg.alpha1) * cfg.alpha2, cfg.alpha)

    def test_stage_one_decides_strong_effect(self):
        d = design(hr=0.2)
        spec = FollowUpSpec.from_control(d.control, 0.999)
        stages = [two_stage(generate_trial(d, 500, spec, replicate_rng(9, "ts", r)),
                            TwoStageConfig(n_boot=50)).auxiliary["stage"] for r in range(20)]
        assert stages.count(1) == 20

    def test_stage_two_reports_choice(self):
        res = two_stage(trial(design(), 50, 10), TwoStageConfig(n_boot=100))
        if res.auxiliary["stage"] == 2:
            assert {"rho", "gamma", "p2", "bootstrap_power"} <= set(res.auxiliary)
            assert res.p_value >= 0.04

    def test_rejects_iff_p_below_alpha(self):
        for r in range(10):
            res = two_stage(trial(design(0.2, 1.5, 0.75), 100, 100 + r), TwoStageConfig(n_boot=100))
            assert res.rejects() == (res.p_value < 0.05)

    def test_deterministic_and_swap_symmetric(self):
        s = trial(design(), 60, 11)
        cfg = TwoStageConfig(n_boot=100)
        a, b, c = two_stage(s, cfg), two_stage(s, cfg), two_stage(s.swapped(), cfg)
        assert a.p_value == b.p_value
        assert_allclose(a.p_value, c.p_value, rtol=1e-10)


class TestDispatch:
    def test_every_method_returns_result(self):
        s = trial(design(0.2, 1.5, 0.5), 60, 12)
        for m in Method:
            res = run_test(s, m, design=design(0.2, 1.5, 0.5), two_stage_config=TwoStageConfig(n_boot=50))
            assert isinstance(res, TestResult) and res.method is m

    def test_method_parse(self):
        assert Method.parse("mcm_lrt") is Method.MCM_LRT
        assert Method.parse("optimallr") is Method.OPTIMAL_LR
        with pytest.raises(ValueError):
            Method.parse("maxcombo")

    def test_result_json_has_no_nan(self):
        res = log_rank(SurvivalSample([1, 2], [0, 0], [0, 1]))
        assert "NaN" not in res.to_json()
