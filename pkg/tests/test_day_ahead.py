#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Test suite for day_ahead.py"""

import math

import numpy as np
import pytest

from feederdispatch.day_ahead import (
    DispatchPlan,
    PfLimit,
    build_dayahead,
    linearize_per_scenario,
    normalization,
    plan_reliability_mrmse,
    replay_scenario,
    solve_dayahead,
)
from feederdispatch.errors import DataError
from feederdispatch.resources import ResourceSet

HORIZON = 4


@pytest.fixture
def scenarios(toy_scenarios):
    return toy_scenarios


class TestPfLimit:
    """Test the power-factor limit"""

    def test_ratios(self):
        pf = PfLimit(cos_theta_min=0.95)

        assert pf.tan_theta == pytest.approx(math.tan(math.acos(0.95)))
        assert pf.k == pytest.approx(1.0 / pf.tan_theta)

    def test_unity_power_factor(self):
        assert PfLimit(cos_theta_min=1.0).k == math.inf

    def test_invalid(self):
        with pytest.raises(DataError):
            PfLimit(cos_theta_min=0.0)


class TestDispatchPlan:
    """Test the plan container"""

    def test_lengths_must_agree(self):
        with pytest.raises(DataError):
            DispatchPlan(timestamps=['0', '1'], p_disp_kw=[1.0, 2.0], q_disp_kvar=[0.0])

    def test_window_truncated_at_end(self):
        plan = DispatchPlan(timestamps=list('abcd'), p_disp_kw=[1.0, 2.0, 3.0, 4.0], q_disp_kvar=np.zeros(4))

        p, q = plan.window(2, 5)

        assert np.array_equal(p, [3.0, 4.0])
        assert q.size == 2

    def test_frame_columns(self):
        plan = DispatchPlan(timestamps=['t0'], p_disp_kw=[1.5], q_disp_kvar=[0.2])

        restored = DispatchPlan.from_frame(plan.to_frame())

        assert list(plan.to_frame().columns) == ['timestamp_utc', 'p_disp_kw', 'q_disp_kvar']
        assert restored.p_disp_kw[0] == 1.5

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            DispatchPlan(timestamps=['t0'], p_disp_kw=[np.nan], q_disp_kvar=[0.0])


class TestReliability:
    """Test normalization and the plan-reliability score"""

    def test_percent_mode(self):
        assert normalization([10.0, 10.0]) == (10.0, 'percent')

    def test_near_zero_mean_switches_to_kw(self):
        assert normalization([1.0, -1.0, 1.0, -1.0]) == (1.0, 'absolute')

    def test_mrmse(self):
        """Two scenarios one kW off in opposite directions"""
        score = plan_reliability_mrmse(np.array([2.0, 2.0]), np.array([[3.0, 3.0], [1.0, 1.0]]))

        assert score.mode == 'percent'
        assert score.value == pytest.approx(50.0)
        assert score.per_scenario == pytest.approx((50.0, 50.0))

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            plan_reliability_mrmse(np.ones(3), np.ones((2, 4)))


class TestLinearization:
    """Test per-scenario linearization"""

    def test_repeated_points_share_models(self, toy_network, scenarios):
        models = linearize_per_scenario(toy_network, scenarios)

        assert len(models) == 2 and len(models[0]) == HORIZON
        assert models[0][0] is models[0][3]
        assert models[1][1] is models[1][2]
        assert models[1][0] is not models[1][1]


class TestDayAheadProblem:
    """Test assembly and solution of the day-ahead problem"""

    def _solve(self, network, scenarios, resources, limits, weight, **kwargs):
        dayahead = build_dayahead(network, scenarios, resources, limits, PfLimit(), weight, **kwargs)
        return dayahead, solve_dayahead(dayahead)

    def test_battery_dynamics_and_capability(self, toy_network, scenarios, toy_resources, toy_limits):
        """Every scenario trajectory respects the SOE recursion and the disk"""
        _, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4)
        battery = toy_resources.batteries[0]
        data = solution.batteries['BAT']

        for w in range(2):
            soe = data['soe'][w]
            expected = battery.initial_soe - battery.hours_per_step * np.cumsum(data['p'][w])
            assert np.allclose(soe, expected, atol=1e-3)
            assert np.all(np.hypot(data['p'][w], data['q'][w]) <= battery.rating_kva + 1e-3)

    def test_cheap_battery_flattens_scenarios(self, toy_network, scenarios, toy_resources, toy_limits):
        """With a negligible battery cost every scenario meets the plan"""
        _, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-6)

        assert np.max(np.abs(solution.p0 - solution.plan.p_disp_kw[None, :])) < 0.05
        assert solution.diagnostics['max_balance_error_kw'] < 1e-3

    def test_plan_is_scenario_mean_without_batteries(self, toy_network, scenarios, toy_limits):
        """Without flexibility the best plan is the mean scenario GCP power"""
        _, solution = self._solve(toy_network, scenarios, ResourceSet(), toy_limits, 0.0)

        assert np.allclose(solution.plan.p_disp_kw, solution.p0.mean(axis=0), atol=1e-4)

    def test_power_factor_at_gcp(self, toy_network, scenarios, toy_resources, toy_limits):
        """|q0| stays within tan(theta) of the import plus export power"""
        _, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4)
        tan_theta = PfLimit().tan_theta

        assert np.all(np.abs(solution.q0) <= tan_theta * (solution.p_plus + solution.p_minus) + 1e-3)

    def test_timestamps_from_day_id(self, toy_network, scenarios, toy_resources, toy_limits):
        dayahead, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4,
                                         day_id='2024-06-14')

        assert dayahead.timestamps[1] == '2024-06-14T00:00:30Z'
        assert solution.plan.timestamps == dayahead.timestamps

    def test_real_deviation_accepted(self, toy_network, scenarios, toy_resources, toy_limits):
        dayahead, _ = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4, deviation='real')

        assert dayahead.deviation == 'real'

    def test_unknown_deviation(self, toy_network, scenarios, toy_resources, toy_limits):
        with pytest.raises(DataError, match='deviation'):
            build_dayahead(toy_network, scenarios, toy_resources, toy_limits, PfLimit(), 1e-4, deviation='both')

    def test_battery_frame_long_format(self, toy_network, scenarios, toy_resources, toy_limits):
        _, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4)

        frame = solution.battery_frame('BAT')

        assert len(frame) == 2 * HORIZON
        assert list(frame.columns) == ['scenario', 'step', 'p_kw', 'q_kvar', 'soe_kwh']

    def test_replay_stays_within_limits(self, toy_network, scenarios, toy_resources, toy_limits):
        """The scheduled trajectory is checked through the AC power flow"""
        _, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4)

        report = replay_scenario(toy_network, scenarios, solution, 1, toy_limits, toy_resources)

        assert report.max_voltage_excess_pu == 0.0
        assert report.max_current_excess_ratio == 0.0
        assert np.allclose(report.p0_kw, solution.p0[1], atol=0.05)

    def test_replay_scenario_range(self, toy_network, scenarios, toy_resources, toy_limits):
        _, solution = self._solve(toy_network, scenarios, toy_resources, toy_limits, 1e-4)

        with pytest.raises(DataError):
            replay_scenario(toy_network, scenarios, solution, 2, toy_limits, toy_resources)
