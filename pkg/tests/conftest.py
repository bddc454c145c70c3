#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Shared fixtures: a four-bus toy feeder, its resources and short realized series."""

import numpy as np
import pytest

from feederdispatch import datafiles
from feederdispatch.config import bundled_data_path
from feederdispatch.day_ahead import DispatchPlan, PfLimit
from feederdispatch.forecasting import ScenarioSet
from feederdispatch.grid_model import (
    Bus,
    GridLimits,
    InjectionVector,
    Line,
    NetworkModel,
    compute_sensitivities,
    solve_power_flow,
)
from feederdispatch.realtime_mpc import Horizon, StepInputs
from feederdispatch.resources import BatteryParams, LoadParams, PvParams, ResourceSet
from feederdispatch.simulator import RealizationData

TOY_STEPS = 6


@pytest.fixture
def toy_network():
    """N0 (slack) - N1, with N2 and N3 branching from N1."""
    return NetworkModel(
        buses=[Bus('N0', 'slack'), Bus('N1'), Bus('N2'), Bus('N3')],
        lines=[
            Line('N0', 'N1', 0.05, 0.02, 200.0),
            Line('N1', 'N2', 0.06, 0.02, 150.0),
            Line('N1', 'N3', 0.07, 0.02, 150.0),
        ],
        v_base_v=400.0,
        s_base_va=100000.0,
        name='toy',
    )


@pytest.fixture
def toy_resources():
    return ResourceSet(
        batteries=[BatteryParams(name='BAT', bus='N2', capacity_kwh=10.0, rating_kva=10.0, initial_soc=0.5)],
        pv_plants=[PvParams(name='PV', bus='N3', rating_kva=8.0, reactive_capable=False)],
        loads=[LoadParams(name='LD', bus='N1', nominal_kva=12.0)],
    )


@pytest.fixture
def toy_limits(toy_network):
    return GridLimits.from_network(toy_network)


@pytest.fixture
def toy_realization():
    """Demand around 6 kW at N1 and about 4 kW of PV potential at N3."""
    steps = np.arange(TOY_STEPS)
    demand = 6.0 + 0.5 * np.sin(steps)
    return RealizationData(
        day_id='toy',
        buses=['N1'],
        demand_p_kw=demand[:, None],
        demand_q_kvar=0.3 * demand[:, None],
        plant_names=['PV'],
        pv_potential_kw=(4.0 + 0.2 * np.cos(steps))[:, None],
    )


@pytest.fixture
def toy_plan():
    return DispatchPlan(
        timestamps=[str(t) for t in range(TOY_STEPS)],
        p_disp_kw=np.full(TOY_STEPS, 3.0),
        q_disp_kvar=np.zeros(TOY_STEPS),
    )


@pytest.fixture
def toy_scenarios():
    """Two four-step scenarios on N1 (demand) and N3 (PV) with different net demand."""
    p = np.zeros((2, 4, 2))
    p[0, :, 0] = -6.0
    p[0, :, 1] = 4.0
    p[1, :, 0] = -8.0
    p[1, :, 1] = np.array([1.0, 2.0, 2.0, 1.0])
    q = np.zeros_like(p)
    q[:, :, 0] = 0.3 * p[:, :, 0]
    return ScenarioSet(buses=['N1', 'N3'], p_kw=p, q_kvar=q, source_days=['a', 'b'])


@pytest.fixture
def toy_step_inputs(toy_network, toy_resources, toy_limits):
    """One control step over three steps: 6 kW demand, 4 kW PV, 3 kW plan."""
    length = 3
    state = solve_power_flow(toy_network, InjectionVector.from_kw(
        toy_network, np.array([-6.0, 0.0, 4.0]), np.array([-1.8, 0.0, 0.0])))
    return StepInputs(
        horizon=Horizon(0, length),
        plan_p_kw=np.full(length, 3.0),
        unc_p_kw=np.tile([-6.0, 0.0, 0.0], (length, 1)),
        unc_q_kvar=np.tile([-1.8, 0.0, 0.0], (length, 1)),
        pv_potential_kw={'PV': np.full(length, 4.0)},
        battery_states=toy_resources.initial_states(),
        lin=compute_sensitivities(toy_network, state),
        limits=toy_limits,
        pf=PfLimit(),
    )


@pytest.fixture
def benchmark_network():
    return datafiles.load_network(bundled_data_path('cigre_lv_feeder.yaml'))


@pytest.fixture
def benchmark_resources(benchmark_network):
    return datafiles.load_resources(bundled_data_path('resources.yaml'), network=benchmark_network)
