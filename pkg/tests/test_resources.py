#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Test suite for resources.py"""

import numpy as np
import pytest

from feederdispatch.convex_core import solve
from feederdispatch.errors import DataError
from feederdispatch.resources import (
    BatteryParams,
    BatteryState,
    LoadParams,
    PvParams,
    ResourceSet,
    battery_rt_update,
    battery_soe_step,
    check_capability,
    pv_rt_problem,
    pv_rt_update,
    soe_matrix,
    soe_trajectory,
)


@pytest.fixture
def battery():
    return BatteryParams(name='BAT', bus='N2', capacity_kwh=12.0, rating_kva=12.0)


class TestBatteryParams:
    """Test battery parameter validation and derived quantities"""

    def test_soe_band(self, battery):
        assert battery.soe_min == pytest.approx(1.2)
        assert battery.soe_max == pytest.approx(10.8)
        assert battery.initial_soe == pytest.approx(6.0)

    def test_initial_soc_outside_band(self):
        with pytest.raises(DataError, match='back-off band'):
            BatteryParams(name='B', bus='N1', capacity_kwh=10.0, rating_kva=5.0, initial_soc=0.95)

    def test_back_off_range(self):
        with pytest.raises(DataError, match='back_off'):
            BatteryParams(name='B', bus='N1', capacity_kwh=10.0, rating_kva=5.0, back_off=0.5)

    def test_split_shares_rating_and_capacity(self, battery):
        """Units get indexed names, their bus and an equal share"""
        units = battery.split(3, ['B05', 'B06', 'B07', 'B08'])

        assert [u.name for u in units] == ['BAT-1', 'BAT-2', 'BAT-3']
        assert [u.bus for u in units] == ['B05', 'B06', 'B07']
        assert all(u.capacity_kwh == pytest.approx(4.0) for u in units)
        assert sum(u.rating_kva for u in units) == pytest.approx(12.0)


class TestStateOfEnergy:
    """Test the energy balance"""

    def test_discharge_removes_energy(self, battery):
        """12 kW for 30 s is 0.1 kWh"""
        state = battery_soe_step(BatteryState.initial(battery), 12.0, battery)

        assert state.soe_kwh == pytest.approx(5.9)
        assert state.soc == pytest.approx(5.9 / 12.0)

    def test_charge_applies_efficiency(self):
        lossy = BatteryParams(name='B', bus='N1', capacity_kwh=12.0, rating_kva=12.0, efficiency=0.9)

        state = battery_soe_step(BatteryState.initial(lossy), -12.0, lossy)

        assert state.soe_kwh == pytest.approx(6.09)

    def test_matrix_matches_trajectory(self, battery):
        """The telescoped matrix reproduces the cumulative sum"""
        p = np.array([3.0, -1.0, 0.5, 2.0])

        assert np.allclose(battery.initial_soe + soe_matrix(battery, 4) @ p,
                           soe_trajectory(battery, battery.initial_soe, p))


class TestResourceSet:
    """Test grouping of resources"""

    def test_controllable_order(self, toy_resources):
        """Batteries come before PV plants; loads are not controllable"""
        assert toy_resources.names == ['BAT', 'PV']
        assert toy_resources.by_name('LD').nominal_kva == 12.0

    def test_duplicate_names(self):
        with pytest.raises(DataError, match='duplicate'):
            ResourceSet(
                pv_plants=[PvParams('X', 'N1', 5.0)],
                loads=[LoadParams('X', 'N2', 5.0)],
            )

    def test_unknown_name(self, toy_resources):
        with pytest.raises(DataError):
            toy_resources.by_name('missing')

    def test_load_reactive_ratio(self):
        assert LoadParams('L', 'N1', 5.0, power_factor=1.0).tan_phi == pytest.approx(0.0)
        assert LoadParams('L', 'N1', 5.0, power_factor=0.8).tan_phi == pytest.approx(0.75)


class TestCapability:
    """Test setpoint checks against the capability sets"""

    def test_battery_inside_disk(self, battery):
        report = check_capability((6.0, 6.0), battery)

        assert report.ok
        assert report.margin > 0

    def test_battery_outside_disk(self, battery):
        report = check_capability((12.0, 1.0), battery)

        assert not report.ok
        assert report.violations[0][0] == 'rating'

    def test_pv_reactive_and_potential(self):
        """A plant without reactive capability may not exchange q nor exceed its potential"""
        plant = PvParams('PV', 'N3', 8.0, reactive_capable=False)

        report = check_capability((5.0, 0.5), plant, potential=4.0)

        assert {kind for kind, _ in report.violations} == {'reactive', 'potential'}


class TestRealTimeUpdates:
    """Test the resource-side minimizers used by the distributed controller"""

    def test_battery_update_projects_onto_disk(self, battery):
        """Away from the SOE limits the update is the disk projection"""
        target = np.array([[30.0, 40.0], [1.0, -1.0]])

        x = battery_rt_update(battery, BatteryState.initial(battery), target, rho=1.0)

        assert np.allclose(x, [[7.2, 9.6], [1.0, -1.0]])

    def test_battery_update_respects_soe_floor(self):
        """A long discharge request stops at the back-off limit"""
        low = BatteryParams(name='B', bus='N1', capacity_kwh=1.0, rating_kva=20.0, initial_soc=0.15)
        target = np.tile([20.0, 0.0], (6, 1))

        x = battery_rt_update(low, BatteryState.initial(low), target, rho=1.0)
        soe = soe_trajectory(low, low.initial_soe, x[:, 0])

        assert soe.min() >= low.soe_min - 1e-5
        assert np.all(np.hypot(x[:, 0], x[:, 1]) <= low.rating_kva + 1e-5)

    @pytest.mark.parametrize('reactive_capable', [False, True])
    def test_pv_update_matches_convex_solve(self, reactive_capable):
        """The closed form agrees with solving the prox problem numerically"""
        plant = PvParams('PV', 'N3', 8.0, reactive_capable=reactive_capable)
        rng = np.random.default_rng(3)
        potential = np.array([0.0, 3.0, 7.5, 8.0, 5.0])
        target = rng.normal(scale=6.0, size=(5, 2))
        rho = 1.5

        closed = pv_rt_update(plant, potential, target, rho)
        problem = pv_rt_problem(plant, potential, target, rho)
        solution = solve(problem)

        assert solution.optimal
        numeric = np.column_stack([problem.block(solution.x, 'pv.p'), problem.block(solution.x, 'pv.q')])
        assert np.allclose(closed, numeric, atol=1e-4)

    def test_pv_update_checks_potential_length(self):
        plant = PvParams('PV', 'N3', 8.0)

        with pytest.raises(DataError):
            pv_rt_update(plant, np.ones(3), np.zeros((4, 2)), 1.0)

    def test_rho_must_be_positive(self):
        with pytest.raises(DataError):
            pv_rt_update(PvParams('PV', 'N3', 8.0), np.ones(2), np.zeros((2, 2)), 0.0)
