#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Test suite for simulator.py"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from feederdispatch import simulator
from feederdispatch.agents import AgentPool
from feederdispatch.day_ahead import DispatchPlan, PfLimit
from feederdispatch.errors import DataError, PowerFlowDivergence, SimulationAborted, SolverFailure
from feederdispatch.grid_model import GridLimits
from feederdispatch.realtime_mpc import AdmmConfig
from feederdispatch.resources import BatteryParams, BatteryState
from feederdispatch.simulator import (
    BASE_COLUMNS,
    LoopSettings,
    SimulationTrace,
    audit_frame,
    audit_trace,
    compute_metrics,
    run_closed_loop,
    sweep_bess,
    sweep_lambda,
)
from feederdispatch.timegrid import day_index, format_timestamps

ORACLE = LoopSettings(horizon_steps=3, forecast='oracle', admm=AdmmConfig(max_iter=300))


@pytest.fixture
def centralized_trace(toy_plan, toy_realization, toy_network, toy_resources):
    return run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'centralized', ORACLE)


def _hand_trace(plan, gcp, unc):
    steps = len(plan)
    frame = pd.DataFrame({
        'step': np.arange(steps),
        'timestamp_utc': [str(t) for t in range(steps)],
        'p_disp_kw': plan,
        'p_gcp_kw': gcp,
        'q_gcp_kvar': np.zeros(steps),
        'p_gcp_unc_kw': unc,
        'q_gcp_unc_kvar': np.zeros(steps),
        'tracking_error_kw': np.asarray(gcp) - np.asarray(plan),
    })
    return SimulationTrace.from_frame(frame)


class TestClosedLoop:
    """Test the closed-loop replay on the toy feeder"""

    def test_centralized_tracks_plan(self, centralized_trace):
        """With exact forecasts the GCP power follows the plan"""
        frame = centralized_trace.frame
        metrics = compute_metrics(centralized_trace)

        assert len(frame) == 6
        assert np.max(np.abs(frame['tracking_error_kw'])) < 0.05
        assert metrics.rmse < metrics.rmse_unc
        assert metrics.failed_steps == 0

    def test_distributed_tracks_plan(self, toy_plan, toy_realization, toy_network, toy_resources):
        trace = run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'distributed', ORACLE)

        assert np.max(np.abs(trace.frame['tracking_error_kw'])) < 0.1
        assert list(trace.timings.columns[:4]) == ['step', 'wall_time_s', 'parallel_time_s', 'aggregator_time_s']
        assert trace.mode == 'distributed'

    def test_persistence_run_records_state(self, toy_plan, toy_realization, toy_network, toy_resources):
        """Every step logs the base columns and an SOE consistent with the realized power"""
        settings = LoopSettings(horizon_steps=3)
        trace = run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'centralized', settings)
        frame = trace.frame
        battery = toy_resources.batteries[0]

        assert set(BASE_COLUMNS) <= set(frame.columns)
        assert trace.battery_names == ('BAT',) and trace.plant_names == ('PV',)
        expected = battery.initial_soe - battery.hours_per_step * np.cumsum(frame['p_kw_BAT'])
        assert np.allclose(frame['soe_kwh_BAT'], expected)
        assert np.all(frame['p_kw_PV'] <= frame['potential_kw_PV'] + 1e-9)

    def test_max_steps(self, toy_plan, toy_realization, toy_network, toy_resources):
        settings = LoopSettings(horizon_steps=2, forecast='oracle', max_steps=2)

        trace = run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'centralized', settings)

        assert trace.steps == 2

    def test_divergence_aborts_with_partial_trace(self, monkeypatch, toy_plan, toy_realization, toy_network,
                                                  toy_resources):
        """Two oracle solves per step: the fifth call fails during step 2"""
        original = simulator.solve_power_flow
        calls = []

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 5:
                raise PowerFlowDivergence('mismatch did not fall', mismatch=1.0, iterations=50)
            return original(*args, **kwargs)

        monkeypatch.setattr(simulator, 'solve_power_flow', flaky)

        with pytest.raises(SimulationAborted) as excinfo:
            run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'centralized', ORACLE)

        assert excinfo.value.step == 2
        assert excinfo.value.trace.steps == 2

    def test_controller_failure_actuates_idle(self, monkeypatch, toy_plan, toy_realization, toy_network,
                                              toy_resources):
        def failing(*args, **kwargs):
            raise SolverFailure('no optimal status')

        monkeypatch.setattr(simulator, 'solve_centralized', failing)

        trace = run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'centralized', ORACLE)
        frame = trace.frame

        assert frame['controller_failed'].all()
        assert np.all(frame['p_kw_BAT'] == 0.0)
        assert np.allclose(frame['p_gcp_kw'], frame['p_gcp_unc_kw'])
        assert compute_metrics(trace).failed_steps == 6

    def test_unknown_mode(self, toy_plan, toy_realization, toy_network, toy_resources):
        with pytest.raises(DataError, match='mode'):
            run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'hybrid', ORACLE)

    def test_plan_too_short(self, toy_realization, toy_network, toy_resources):
        short = DispatchPlan(timestamps=['0', '1'], p_disp_kw=[3.0, 3.0], q_disp_kvar=[0.0, 0.0])

        with pytest.raises(DataError, match='plan covers'):
            run_closed_loop(short, toy_realization, toy_network, toy_resources, 'centralized', ORACLE)

    def test_invalid_forecast(self):
        with pytest.raises(DataError):
            LoopSettings(forecast='perfect')

    def test_plan_of_another_day_rejected(self, toy_plan, toy_realization, toy_network, toy_resources):
        """Calendar stamps of plan and realization must be the same UTC instants"""
        realization = replace(toy_realization, day_id='2024-06-14', timestamps=None)
        plan = replace(toy_plan, timestamps=format_timestamps(day_index('2024-06-15', len(toy_plan))))

        with pytest.raises(DataError, match='not aligned'):
            run_closed_loop(plan, realization, toy_network, toy_resources, 'centralized', ORACLE)

    def test_date_only_stamps_compared(self, toy_plan, toy_realization, toy_network, toy_resources):
        realization = replace(toy_realization, timestamps=['2024-06-14'] * len(toy_plan))
        plan = replace(toy_plan, timestamps=['2024-06-14'] + ['2024-06-15'] * (len(toy_plan) - 1))

        with pytest.raises(DataError, match='step 1 is 2024-06-15'):
            run_closed_loop(plan, realization, toy_network, toy_resources, 'centralized', ORACLE)

    def test_offset_notation_accepted(self, toy_plan, toy_realization, toy_network, toy_resources):
        realization = replace(toy_realization, day_id='2024-06-14', timestamps=None)
        stamps = [ts.isoformat() for ts in day_index('2024-06-14', len(toy_plan))]
        plan = replace(toy_plan, timestamps=stamps)

        trace = run_closed_loop(plan, realization, toy_network, toy_resources, 'centralized',
                                replace(ORACLE, max_steps=1))

        assert stamps[0].endswith('+00:00')
        assert trace.frame['timestamp_utc'].iloc[0] == '2024-06-14T00:00:00Z'

    def test_first_setpoints_ignore_first_measurement(self, toy_plan, toy_realization, toy_network,
                                                       toy_resources):
        """With persistence forecasts step 0 is planned from the plan alone"""
        settings = LoopSettings(horizon_steps=3, max_steps=1)
        demand = toy_realization.demand_p_kw.copy()
        demand[0] += 2.5
        potential = toy_realization.pv_potential_kw.copy()
        potential[0] = 0.5
        changed = replace(toy_realization, demand_p_kw=demand, pv_potential_kw=potential)

        base = run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'centralized', settings)
        other = run_closed_loop(toy_plan, changed, toy_network, toy_resources, 'centralized', settings)

        for column in ('p_set_kw_BAT', 'q_set_kvar_BAT', 'p_set_kw_PV'):
            assert other.frame[column].iloc[0] == pytest.approx(base.frame[column].iloc[0], abs=1e-9)
        assert other.frame['p_gcp_unc_kw'].iloc[0] > base.frame['p_gcp_unc_kw'].iloc[0] + 2.0

    def test_distributed_run_closes_its_pool(self, monkeypatch, toy_plan, toy_realization, toy_network,
                                             toy_resources):
        """One worker pool serves every step and is closed when the run ends"""
        pools = []

        class RecordingPool(AgentPool):
            def __init__(self, *args, **kwargs):
                super().__init__(*args, **kwargs)
                self.closed = False
                pools.append(self)

            def close(self):
                self.closed = True
                super().close()

        monkeypatch.setattr(simulator, 'AgentPool', RecordingPool)

        run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'distributed',
                        replace(ORACLE, max_steps=3))

        assert len(pools) == 1
        assert pools[0].closed

    def test_aborted_distributed_run_closes_its_pool(self, monkeypatch, toy_plan, toy_realization, toy_network,
                                                     toy_resources):
        pools = []

        class RecordingPool(AgentPool):
            def close(self):
                pools.append(self)
                super().close()

        def diverging(*args, **kwargs):
            raise PowerFlowDivergence('mismatch did not fall', mismatch=1.0, iterations=50)

        monkeypatch.setattr(simulator, 'AgentPool', RecordingPool)
        monkeypatch.setattr(simulator, 'solve_power_flow', diverging)

        with pytest.raises(SimulationAborted):
            run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'distributed', ORACLE)

        assert len(pools) == 1

    def test_given_pool_left_open(self, toy_plan, toy_realization, toy_network, toy_resources):
        with AgentPool() as pool:
            run_closed_loop(toy_plan, toy_realization, toy_network, toy_resources, 'distributed',
                            replace(ORACLE, max_steps=1, pool=pool))

            assert pool.workers == ['BAT', 'PV']


class TestActuation:
    """Test clipping of commanded setpoints"""

    def test_battery_limited_by_rating_and_energy(self, toy_resources):
        battery = toy_resources.batteries[0]
        states = {'BAT': BatteryState(soe_kwh=battery.soe_min + 0.05, capacity_kwh=battery.capacity_kwh)}

        realized = simulator._actuate({'BAT': (12.0, 0.0), 'PV': (1.0, 0.0)}, toy_resources, states, {'PV': 3.0})

        assert realized['BAT'][0] == pytest.approx(0.05 / battery.hours_per_step)

    def test_pv_limited_by_potential_and_reactive_capability(self, toy_resources):
        states = toy_resources.initial_states()

        realized = simulator._actuate({'BAT': (0.0, 0.0), 'PV': (5.0, 1.0)}, toy_resources, states, {'PV': 3.0})

        assert realized['PV'] == (3.0, 0.0)

    def test_pv_cannot_absorb(self, toy_resources):
        realized = simulator._actuate({'BAT': (0.0, 0.0), 'PV': (-2.0, 0.0)}, toy_resources,
                                      toy_resources.initial_states(), {'PV': 3.0})

        assert realized['PV'][0] == 0.0


class TestMetrics:
    """Test tracking statistics"""

    def test_percent_of_plan_mean(self):
        metrics = compute_metrics(_hand_trace([10.0] * 4, [11.0, 9.0, 10.0, 12.0], [15.0, 5.0, 10.0, 10.0]))

        assert metrics.mode == 'percent'
        assert metrics.rmse == pytest.approx(12.247449, rel=1e-6)
        assert metrics.mean == pytest.approx(5.0)
        assert metrics.mae == pytest.approx(20.0)
        assert metrics.rmse_unc == pytest.approx(35.355339, rel=1e-6)
        assert metrics.mae_unc == pytest.approx(50.0)
        assert metrics.converged_share == 1.0

    def test_absolute_for_near_zero_mean_plan(self):
        plan = [1.0, -1.0, 1.0, -1.0]
        gcp = [2.0, -2.0, 1.0, 1.0]

        metrics = compute_metrics(_hand_trace(plan, gcp, plan))

        assert metrics.mode == 'absolute'
        assert metrics.rmse == pytest.approx(np.sqrt(1.5))
        assert metrics.rmse_unc == 0.0

    def test_timings_only_on_request(self, centralized_trace):
        metrics = compute_metrics(centralized_trace)

        assert 'time_mean_s' not in metrics.to_dict()
        assert metrics.to_dict(include_timing=True)['time_max_s'] >= 0.0

    def test_empty_trace(self):
        with pytest.raises(DataError):
            compute_metrics(_hand_trace([], [], []))

    def test_missing_columns(self):
        with pytest.raises(DataError, match='lacks columns'):
            SimulationTrace.from_frame(pd.DataFrame({'step': [0]}))


class TestAudit:
    """Test the AC re-check of a trace"""

    def test_clean_under_default_limits(self, centralized_trace, toy_network, toy_limits):
        reports = audit_trace(centralized_trace, toy_network, toy_limits)

        assert len(reports) == 6
        assert audit_frame(reports).empty

    def test_tight_band_reported_per_step(self, centralized_trace, toy_network):
        limits = GridLimits(v_min=0.9999, v_max=1.05, i_max=toy_network.ampacity_pu())

        frame = audit_frame(audit_trace(centralized_trace, toy_network, limits))

        assert set(frame['kind']) == {'v_min'}
        assert 'N1' in set(frame['element'])
        assert list(frame.columns) == ['step', 'kind', 'element', 'value', 'limit', 'magnitude']


class TestSweeps:
    """Test the parameter sweeps"""

    def test_cheap_battery_gives_more_reliable_plan(self, toy_network, toy_scenarios, toy_resources, toy_limits):
        frame = sweep_lambda(toy_network, toy_scenarios, toy_resources, toy_limits, PfLimit(), [1e-4, 10.0])

        assert list(frame['lambda']) == [1e-4, 10.0]
        assert frame['mrmse'].iloc[0] < frame['mrmse'].iloc[1]

    def test_lambda_values_validated(self, toy_network, toy_scenarios, toy_resources, toy_limits):
        with pytest.raises(DataError):
            sweep_lambda(toy_network, toy_scenarios, toy_resources, toy_limits, PfLimit(), [-1.0])

    def test_bess_split(self, toy_plan, toy_realization, toy_network, toy_resources):
        """Two units on N1 and N2 report their own compute times"""
        settings = LoopSettings(horizon_steps=2, forecast='oracle', max_steps=2, admm=AdmmConfig(max_iter=20))

        summary, times = sweep_bess(toy_plan, toy_realization, toy_network, toy_resources, [1, 2], ['N1', 'N2'],
                                    settings)

        assert list(summary['count']) == [1, 2]
        assert set(times.loc[times['count'] == 2, 'resource']) == {'BAT-1', 'BAT-2', 'PV'}
        assert len(times) == 2 * 2 + 3 * 2

    def test_bess_count_beyond_buses(self, toy_plan, toy_realization, toy_network, toy_resources):
        with pytest.raises(DataError, match='exceeds'):
            sweep_bess(toy_plan, toy_realization, toy_network, toy_resources, [3], ['N1', 'N2'])

    def test_bess_needs_one_battery(self, toy_plan, toy_realization, toy_network, toy_resources):
        extra = BatteryParams(name='B2', bus='N1', capacity_kwh=5.0, rating_kva=5.0)
        resources = toy_resources.with_batteries(list(toy_resources.batteries) + [extra])

        with pytest.raises(DataError, match='exactly one battery'):
            sweep_bess(toy_plan, toy_realization, toy_network, resources, [1], ['N1'])
