#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Closed-loop replay of a realized day against a dispatch plan.

Every 30-s step the controller sees the measurements of the previous step
(the AC oracle state and the realized demand and PV potential), plans the
window that starts at the current step, and the first setpoints of that
window are actuated. The realized GCP power always comes from the exact AC
power flow; the uncontrolled counterfactual runs the same oracle with the
batteries idle and the PV plants at their potential.

Before the first measurement the persistence forecast falls back to the plan
as net demand with no PV, and the controller linearizes around the power flow
of that forecast.
"""

import logging
import math
import re
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from feederdispatch.agents import AgentPool, run_agents
from feederdispatch.convex_core import SolverConfig, project_disk
from feederdispatch.day_ahead import (
    PfLimit,
    build_dayahead,
    linearize_per_scenario,
    normalization,
    plan_reliability_mrmse,
    solve_dayahead,
)
from feederdispatch.errors import (
    DataError,
    PowerFlowDivergence,
    SimulationAborted,
    SolverFailure,
)
from feederdispatch.forecasting import PERSISTENCE_WINDOW, persistence_forecast
from feederdispatch.grid_model import (
    GridLimits,
    InjectionVector,
    audit_constraints,
    build_admittance,
    compute_sensitivities,
    solve_power_flow,
)
from feederdispatch.realtime_mpc import (
    AdmmConfig,
    AggregatorProblem,
    Horizon,
    StepInputs,
    build_agents,
    solve_centralized,
)
from feederdispatch.resources import battery_soe_step
from feederdispatch.timegrid import STEP_SECONDS, day_index, format_timestamps

logger = logging.getLogger(__name__)

MODES = ('centralized', 'distributed')
FORECASTS = ('persistence', 'oracle')
CALENDAR_STAMP = re.compile(r'^\d{4}-\d{2}-\d{2}')

BASE_COLUMNS = (
    'step', 'timestamp_utc', 'p_disp_kw', 'p_gcp_kw', 'q_gcp_kvar', 'p_gcp_unc_kw', 'q_gcp_unc_kvar',
    'tracking_error_kw',
)


@dataclass(frozen=True, eq=False)
class RealizationData:
    """Realized demand per load bus and PV potential per plant, per step."""

    day_id: str
    buses: tuple
    demand_p_kw: np.ndarray
    demand_q_kvar: np.ndarray
    plant_names: tuple
    pv_potential_kw: np.ndarray
    timestamps: tuple = None

    def __post_init__(self):
        object.__setattr__(self, 'buses', tuple(self.buses))
        object.__setattr__(self, 'plant_names', tuple(self.plant_names))
        p = np.asarray(self.demand_p_kw, dtype=float)
        q = np.asarray(self.demand_q_kvar, dtype=float)
        if p.ndim != 2 or p.shape != q.shape or p.shape[1] != len(self.buses):
            raise DataError("realization demand must have shape (steps, {0})".format(len(self.buses)))
        pv = np.asarray(self.pv_potential_kw, dtype=float).reshape(p.shape[0], -1)
        if pv.shape[1] != len(self.plant_names):
            raise DataError("realization PV potential must cover {0} plants".format(len(self.plant_names)))
        if np.any(~np.isfinite(pv)) or np.any(pv < 0):
            raise DataError("realized PV potential must be finite and non-negative")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise DataError("realized demand must be finite")
        object.__setattr__(self, 'demand_p_kw', p)
        object.__setattr__(self, 'demand_q_kvar', q)
        object.__setattr__(self, 'pv_potential_kw', pv)
        timestamps = self.timestamps
        if timestamps is None:
            try:
                timestamps = format_timestamps(day_index(self.day_id, p.shape[0]))
            except DataError:
                timestamps = [str(t) for t in range(p.shape[0])]
        if len(timestamps) != p.shape[0]:
            raise DataError("realization has {0} timestamps for {1} steps".format(len(timestamps), p.shape[0]))
        object.__setattr__(self, 'timestamps', tuple(timestamps))

    @property
    def steps(self):
        return self.demand_p_kw.shape[0]

    def potential_of(self, name):
        return self.pv_potential_kw[:, self.plant_names.index(name)]

    def truncated(self, steps):
        return replace(
            self,
            demand_p_kw=self.demand_p_kw[:steps],
            demand_q_kvar=self.demand_q_kvar[:steps],
            pv_potential_kw=self.pv_potential_kw[:steps],
            timestamps=self.timestamps[:steps],
        )


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    """Per-step record of a closed-loop run.

    ``frame`` is deterministic given the inputs; wall-clock measurements are
    kept apart in ``timings``.
    """

    frame: pd.DataFrame
    timings: pd.DataFrame = None
    battery_names: tuple = ()
    plant_names: tuple = ()
    mode: str = None

    @property
    def steps(self):
        return len(self.frame)

    @classmethod
    def from_frame(cls, frame, timings=None, mode=None):
        missing = [c for c in BASE_COLUMNS if c not in frame.columns]
        if missing:
            raise DataError("trace lacks columns: {0}".format(', '.join(missing)))
        batteries = tuple(c[len('soe_kwh_'):] for c in frame.columns if c.startswith('soe_kwh_'))
        plants = tuple(c[len('potential_kw_'):] for c in frame.columns if c.startswith('potential_kw_'))
        return cls(frame=frame, timings=timings, battery_names=batteries, plant_names=plants, mode=mode)

    def injection_buses(self):
        return [c[len('inj_p_kw_'):] for c in self.frame.columns if c.startswith('inj_p_kw_')]


@dataclass(frozen=True)
class Metrics:
    """Tracking statistics of a trace against its plan.

    Errors are realized minus plan; in 'percent' mode they are expressed as
    a percentage of the plan mean, in 'absolute' mode in kW. MAE is the
    largest absolute error.
    """

    mode: str
    steps: int
    rmse: float
    mean: float
    mae: float
    rmse_unc: float
    mean_unc: float
    mae_unc: float
    iterations_mean: float
    iterations_sd: float
    iterations_max: int
    converged_share: float
    soft_steps: int
    failed_steps: int
    curtailment_kwh: float
    soc_min: float = None
    soc_max: float = None
    time_mean_s: float = None
    time_sd_s: float = None
    time_max_s: float = None
    parallel_time_mean_s: float = None
    parallel_time_max_s: float = None

    TIMING_FIELDS = ('time_mean_s', 'time_sd_s', 'time_max_s', 'parallel_time_mean_s', 'parallel_time_max_s')

    def to_dict(self, include_timing=False):
        data = {}
        for key in self.__dataclass_fields__:
            if key in self.TIMING_FIELDS and not include_timing:
                continue
            value = getattr(self, key)
            if isinstance(value, (np.floating, np.integer)):
                value = value.item()
            data[key] = value
        return data


@dataclass(frozen=True)
class LoopSettings:
    """Controller settings of a closed-loop run.

    ``forecast`` is 'persistence' (trailing mean of the last measurements)
    or 'oracle' (the realized series, for consistency checks).
    """

    horizon_steps: int = 60
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    soft_weight: float = 1000.0
    limits: GridLimits = None
    pf: PfLimit = field(default_factory=PfLimit)
    max_steps: int = None
    forecast: str = 'persistence'
    window: int = PERSISTENCE_WINDOW
    pool: object = None

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise DataError("horizon_steps must be at least 1")
        if self.forecast not in FORECASTS:
            raise DataError("forecast must be one of {0}, got {1!r}".format('|'.join(FORECASTS), self.forecast))
        if self.max_steps is not None and self.max_steps < 1:
            raise DataError("max_steps must be at least 1")

    @classmethod
    def from_config(cls, cfg, network, **overrides):
        settings = cls(
            horizon_steps=cfg.horizon_steps,
            admm=cfg.admm_config(),
            solver=cfg.solver_config(),
            soft_weight=cfg.soft_tracking_weight,
            limits=cfg.grid_limits(network),
            pf=cfg.pf_limit(),
            max_steps=cfg.max_steps,
        )
        return replace(settings, **overrides) if overrides else settings


@dataclass(frozen=True, eq=False)
class StepOutcome:
    setpoints: dict
    iterations: int
    converged: bool
    soft_active: bool
    failed: bool
    wall_time_s: float
    parallel_time_s: float
    aggregator_time_s: float = 0.0
    resource_times: dict = field(default_factory=dict)
    state: object = None


def _idle_setpoints(inputs, resources):
    setpoints = {b.name: (0.0, 0.0) for b in resources.batteries}
    for plant in resources.pv_plants:
        setpoints[plant.name] = (float(inputs.pv_potential_kw[plant.name][0]), 0.0)
    return setpoints


def control_step(inputs, resources, network, mode, settings, warm=None):
    """Run the controller for one step and return the first-step setpoints.

    A controller failure is logged and turns into idle batteries with the PV
    plants at their forecast potential, flagged on the outcome.
    """
    if mode not in MODES:
        raise DataError("mode must be one of {0}, got {1!r}".format('|'.join(MODES), mode))
    names = resources.names
    if not names:
        return StepOutcome({}, 0, True, False, False, 0.0, 0.0)

    started = time.perf_counter()
    try:
        if mode == 'centralized':
            result = solve_centralized(
                inputs, resources, network, soft_weight=settings.soft_weight, solver_config=settings.solver)
            wall = time.perf_counter() - started
            return StepOutcome(
                setpoints=result.first_setpoints(names),
                iterations=result.iterations,
                converged=True,
                soft_active=result.soft_active,
                failed=False,
                wall_time_s=wall,
                parallel_time_s=wall,
            )
        agents = build_agents(inputs, resources, settings.solver)
        aggregator = AggregatorProblem(
            inputs, resources, network, soft_weight=settings.soft_weight, solver_config=settings.solver)
        state = warm.shifted(inputs.horizon.length) if warm is not None else None
        result = run_agents(agents, aggregator, config=settings.admm, state=state, pool=settings.pool)
    except SolverFailure as exc:
        logger.warning("controller failed step=%d, actuating idle setpoints: %s", inputs.horizon.start, exc)
        return StepOutcome(
            setpoints=_idle_setpoints(inputs, resources),
            iterations=0,
            converged=False,
            soft_active=False,
            failed=True,
            wall_time_s=time.perf_counter() - started,
            parallel_time_s=0.0,
        )
    wall = time.perf_counter() - started
    agent_times = np.array([result.agent_times[name] for name in names])
    aggregator_times = np.asarray(result.aggregator_times)
    parallel = float(np.sum(agent_times.max(axis=0) + aggregator_times))
    return StepOutcome(
        setpoints=result.first_setpoints(names),
        iterations=result.report.iterations,
        converged=result.report.converged,
        soft_active=result.soft_active,
        failed=False,
        wall_time_s=wall,
        parallel_time_s=parallel,
        aggregator_time_s=float(aggregator_times.sum()),
        resource_times={name: float(agent_times[r].sum()) for r, name in enumerate(names)},
        state=result.state,
    )


def _actuate(setpoints, resources, states, potentials):
    """Clip commanded setpoints to what the devices can physically deliver."""
    realized = {}
    for battery in resources.batteries:
        p, q = project_disk(setpoints[battery.name], battery.rating_kva)
        soe = states[battery.name].soe_kwh
        hours = battery.hours_per_step
        p_max = max(soe - battery.soe_min, 0.0) / hours
        p_min = -max(battery.soe_max - soe, 0.0) / (battery.efficiency * hours)
        realized[battery.name] = (min(max(p, p_min), p_max), q)
    for plant in resources.pv_plants:
        p, q = setpoints[plant.name]
        if not plant.reactive_capable:
            q = 0.0
        p, q = project_disk((max(p, 0.0), q), plant.rating_kva)
        realized[plant.name] = (min(p, potentials[plant.name]), q)
    return realized


def _injection(network, mapping, demand_p, demand_q, resources, realized):
    p_kw = -demand_p @ mapping
    q_kvar = -demand_q @ mapping
    for item in resources.controllable:
        k = network.pq_position(item.bus)
        p_kw[k] += realized[item.name][0]
        q_kvar[k] += realized[item.name][1]
    return p_kw, q_kvar


def _oracle(network, ybus, p_kw, q_kvar, step):
    try:
        return solve_power_flow(network, InjectionVector.from_kw(network, p_kw, q_kvar), ybus=ybus)
    except PowerFlowDivergence as exc:
        raise PowerFlowDivergence(
            "oracle power flow diverged at step {0}: {1}".format(step, exc),
            mismatch=exc.mismatch, iterations=exc.iterations,
        ) from exc


def _utc_stamps(stamps, label):
    """Parsed UTC instants, or None when the stamps are plain step labels."""
    if not all(CALENDAR_STAMP.match(str(stamp)) for stamp in stamps):
        return None
    try:
        return pd.to_datetime(pd.Series(stamps, dtype=str), utc=True).values
    except (ValueError, TypeError) as exc:
        raise DataError("{0} timestamps are not valid UTC times: {1}".format(label, exc))


def _check_alignment(plan, realization, steps):
    if len(plan) < steps:
        raise DataError("plan covers {0} steps, realization needs {1}".format(len(plan), steps))
    planned = _utc_stamps(plan.timestamps[:steps], 'plan')
    realized = _utc_stamps(realization.timestamps[:steps], 'realization')
    if planned is None or realized is None:
        return
    mismatch = np.flatnonzero(planned != realized)
    if mismatch.size:
        step = int(mismatch[0])
        raise DataError("plan and realization are not aligned on the same UTC grid: step {0} is {1} in the plan "
                        "and {2} in the realization".format(step, plan.timestamps[step], realization.timestamps[step]))


def _forecasts(realization, plan, settings, step, horizon):
    if settings.forecast == 'oracle':
        window = slice(step, step + horizon.length)
        return (realization.demand_p_kw[window], realization.demand_q_kvar[window],
                realization.pv_potential_kw[window])
    if step == 0:
        # nothing measured yet: the plan stands in for the net demand and PV is taken as zero
        buses = len(realization.buses)
        demand_p = np.full((1, buses), float(plan.p_disp_kw[0]) / buses)
        demand_q = np.zeros((1, buses))
        pv = np.zeros((1, len(realization.plant_names)))
    else:
        recent = slice(max(step - settings.window, 0), step)
        demand_p = realization.demand_p_kw[recent]
        demand_q = realization.demand_q_kvar[recent]
        pv = realization.pv_potential_kw[recent]
    length = horizon.length
    return (persistence_forecast(demand_p, length, settings.window),
            persistence_forecast(demand_q, length, settings.window),
            persistence_forecast(pv, length, settings.window))


def _row(step, realization, plan_kw, network, resources, commanded, realized, states, potentials,
         controlled, uncontrolled, outcome, limits, p_kw, q_kvar):
    p_gcp = float(network.from_pu(controlled.p0))
    row = {
        'step': step,
        'timestamp_utc': realization.timestamps[step],
        'p_disp_kw': plan_kw,
        'p_gcp_kw': p_gcp,
        'q_gcp_kvar': float(network.from_pu(controlled.q0)),
        'p_gcp_unc_kw': float(network.from_pu(uncontrolled.p0)),
        'q_gcp_unc_kvar': float(network.from_pu(uncontrolled.q0)),
        'tracking_error_kw': p_gcp - plan_kw,
    }
    for name in resources.names:
        row['p_set_kw_' + name] = commanded[name][0]
        row['q_set_kvar_' + name] = commanded[name][1]
        row['p_kw_' + name] = realized[name][0]
        row['q_kvar_' + name] = realized[name][1]
    for battery in resources.batteries:
        row['soe_kwh_' + battery.name] = states[battery.name].soe_kwh
        row['soc_' + battery.name] = states[battery.name].soc
    for plant in resources.pv_plants:
        row['potential_kw_' + plant.name] = potentials[plant.name]
        row['curtailment_kw_' + plant.name] = potentials[plant.name] - realized[plant.name][0]
    v = controlled.pq_v_mag
    row.update({
        'iterations': outcome.iterations,
        'converged': bool(outcome.converged),
        'soft_tracking': bool(outcome.soft_active),
        'controller_failed': bool(outcome.failed),
        'v_min_pu': float(v.min()),
        'v_max_pu': float(v.max()),
        'i_max_ratio': float(np.max(controlled.i_mag / limits.i_max)),
        'p_loss_kw': float(network.from_pu(controlled.p_loss)),
    })
    for k, bus in enumerate(network.pq_ids):
        row['inj_p_kw_' + bus] = float(p_kw[k])
        row['inj_q_kvar_' + bus] = float(q_kvar[k])
    return row


def _timing_row(step, outcome, names):
    row = {
        'step': step,
        'wall_time_s': outcome.wall_time_s,
        'parallel_time_s': outcome.parallel_time_s,
        'aggregator_time_s': outcome.aggregator_time_s,
    }
    for name in names:
        row['time_{0}_s'.format(name)] = outcome.resource_times.get(name, 0.0)
    return row


def _trace(rows, timing_rows, resources, mode):
    return SimulationTrace(
        frame=pd.DataFrame(rows),
        timings=pd.DataFrame(timing_rows),
        battery_names=tuple(b.name for b in resources.batteries),
        plant_names=tuple(g.name for g in resources.pv_plants),
        mode=mode,
    )


def run_closed_loop(plan, realization, network, resources, mode='distributed', settings=None):
    """Replay a realized day with the real-time controller in the loop.

    Args:
        plan: DispatchPlan on the same step grid as the realization.
        realization: RealizationData.
        network: NetworkModel.
        resources: ResourceSet.
        mode: 'centralized' or 'distributed'.
        settings: LoopSettings.

    Returns:
        SimulationTrace

    Raises:
        SimulationAborted: the oracle power flow diverged; the exception
            carries the step and the trace up to the previous step.
    """
    settings = settings or LoopSettings()
    if mode not in MODES:
        raise DataError("mode must be one of {0}, got {1!r}".format('|'.join(MODES), mode))
    missing = [g.name for g in resources.pv_plants if g.name not in realization.plant_names]
    if missing:
        raise DataError("realization lacks PV potential of {0}".format(', '.join(missing)))
    steps = realization.steps if settings.max_steps is None else min(settings.max_steps, realization.steps)
    _check_alignment(plan, realization, steps)

    # one worker per resource for the whole day
    pool = None
    if mode == 'distributed' and settings.pool is None:
        pool = AgentPool()
        settings = replace(settings, pool=pool)
    try:
        return _replay(plan, realization, network, resources, mode, settings, steps)
    finally:
        if pool is not None:
            pool.close()


def _replay(plan, realization, network, resources, mode, settings, steps):
    limits = settings.limits or GridLimits.from_network(network)
    ybus = build_admittance(network)
    mapping = network.injection_map(realization.buses)
    states = resources.initial_states()
    idle = {b.name: (0.0, 0.0) for b in resources.batteries}
    names = resources.names
    rows = []
    timing_rows = []
    warm = None
    previous = None

    logger.info("closed loop start mode=%s steps=%d horizon=%d", mode, steps, settings.horizon_steps)
    for step in range(steps):
        try:
            potentials = {g.name: float(realization.potential_of(g.name)[step]) for g in resources.pv_plants}
            uncontrolled_set = dict(idle, **{name: (value, 0.0) for name, value in potentials.items()})
            unc_p, unc_q = _injection(network, mapping, realization.demand_p_kw[step],
                                      realization.demand_q_kvar[step], resources, uncontrolled_set)
            uncontrolled = _oracle(network, ybus, unc_p, unc_q, step)

            horizon = Horizon.starting(step, settings.horizon_steps, steps)
            demand_p, demand_q, pv_forecast = _forecasts(realization, plan, settings, step, horizon)
            if previous is None:
                # nothing measured before step 0: linearize around the forecast with the batteries idle
                previous = uncontrolled if settings.forecast == 'oracle' else _oracle(
                    network, ybus, -demand_p[0] @ mapping, -demand_q[0] @ mapping, step)
            inputs = StepInputs(
                horizon=horizon,
                plan_p_kw=plan.p_disp_kw[horizon.start:horizon.stop],
                unc_p_kw=-demand_p @ mapping,
                unc_q_kvar=-demand_q @ mapping,
                pv_potential_kw={
                    name: pv_forecast[:, realization.plant_names.index(name)]
                    for name in (g.name for g in resources.pv_plants)
                },
                battery_states=states,
                lin=compute_sensitivities(network, previous, t=step, ybus=ybus),
                limits=limits,
                pf=settings.pf,
            )
            outcome = control_step(inputs, resources, network, mode, settings, warm=warm)
            warm = outcome.state
            commanded = outcome.setpoints
            realized = _actuate(commanded, resources, states, potentials)
            for name in names:
                if not math.isclose(commanded[name][0], realized[name][0], abs_tol=1e-6):
                    logger.debug("actuation clipped step=%d resource=%s commanded=%.6f realized=%.6f",
                                 step, name, commanded[name][0], realized[name][0])
            p_kw, q_kvar = _injection(network, mapping, realization.demand_p_kw[step],
                                      realization.demand_q_kvar[step], resources, realized)
            controlled = _oracle(network, ybus, p_kw, q_kvar, step)
        except PowerFlowDivergence as exc:
            logger.error("closed loop aborted step=%d: %s", step, exc)
            raise SimulationAborted(str(exc), step=step, trace=_trace(rows, timing_rows, resources, mode)) from exc

        states = {
            b.name: battery_soe_step(states[b.name], realized[b.name][0], b) for b in resources.batteries
        }
        rows.append(_row(step, realization, float(plan.p_disp_kw[step]), network, resources, commanded,
                         realized, states, potentials, controlled, uncontrolled, outcome, limits, p_kw, q_kvar))
        timing_rows.append(_timing_row(step, outcome, names))
        previous = controlled
        logger.debug("step=%d p_gcp=%.4f plan=%.4f iterations=%d", step, rows[-1]['p_gcp_kw'],
                     rows[-1]['p_disp_kw'], outcome.iterations)

    logger.info("closed loop done mode=%s steps=%d", mode, steps)
    return _trace(rows, timing_rows, resources, mode)


def _stats(errors, divisor, scale):
    if errors.size == 0:
        return 0.0, 0.0, 0.0
    rmse = float(np.sqrt(np.mean(errors ** 2))) * scale / divisor
    mean = float(np.mean(errors)) * scale / divisor
    mae = float(np.max(np.abs(errors))) * scale / divisor
    return rmse, mean, mae


def compute_metrics(trace, plan=None, hours_per_step=STEP_SECONDS / 3600.0):
    """Tracking, convergence and timing statistics of a trace.

    Controlled and uncontrolled errors are evaluated on the same steps.
    """
    frame = trace.frame
    if len(frame) == 0:
        raise DataError("cannot compute metrics of an empty trace")
    if plan is not None:
        plan_kw = np.asarray(plan.p_disp_kw, dtype=float)[frame['step'].to_numpy(dtype=int)]
    else:
        plan_kw = frame['p_disp_kw'].to_numpy(dtype=float)
    divisor, mode = normalization(plan_kw)
    scale = 100.0 if mode == 'percent' else 1.0
    rmse, mean, mae = _stats(frame['p_gcp_kw'].to_numpy(dtype=float) - plan_kw, divisor, scale)
    rmse_unc, mean_unc, mae_unc = _stats(frame['p_gcp_unc_kw'].to_numpy(dtype=float) - plan_kw, divisor, scale)

    iterations = frame['iterations'].to_numpy(dtype=float) if 'iterations' in frame else np.zeros(len(frame))
    curtailment = [c for c in frame.columns if c.startswith('curtailment_kw_')]
    soc = [c for c in frame.columns if c.startswith('soc_')]
    timing = {}
    timings = trace.timings
    if timings is not None and len(timings):
        wall = timings['wall_time_s'].to_numpy(dtype=float)
        parallel = timings['parallel_time_s'].to_numpy(dtype=float)
        timing = {
            'time_mean_s': float(wall.mean()),
            'time_sd_s': float(wall.std()),
            'time_max_s': float(wall.max()),
            'parallel_time_mean_s': float(parallel.mean()),
            'parallel_time_max_s': float(parallel.max()),
        }
    return Metrics(
        mode=mode,
        steps=len(frame),
        rmse=rmse,
        mean=mean,
        mae=mae,
        rmse_unc=rmse_unc,
        mean_unc=mean_unc,
        mae_unc=mae_unc,
        iterations_mean=float(iterations.mean()),
        iterations_sd=float(iterations.std()),
        iterations_max=int(iterations.max()),
        converged_share=float(frame['converged'].astype(bool).mean()) if 'converged' in frame else 1.0,
        soft_steps=int(frame['soft_tracking'].astype(bool).sum()) if 'soft_tracking' in frame else 0,
        failed_steps=int(frame['controller_failed'].astype(bool).sum()) if 'controller_failed' in frame else 0,
        curtailment_kwh=float(frame[curtailment].to_numpy(dtype=float).sum() * hours_per_step) if curtailment else 0.0,
        soc_min=float(frame[soc].to_numpy(dtype=float).min()) if soc else None,
        soc_max=float(frame[soc].to_numpy(dtype=float).max()) if soc else None,
        **timing,
    )


def audit_trace(trace, network, limits, tolerance=1e-9):
    """Exact AC re-check of every step's realized injections.

    Returns:
        list of ConstraintReport, one per step.
    """
    frame = trace.frame
    if len(frame) == 0:
        return []
    buses = list(network.pq_ids)
    p_cols = ['inj_p_kw_' + bus for bus in buses]
    q_cols = ['inj_q_kvar_' + bus for bus in buses]
    missing = [c for c in p_cols + q_cols if c not in frame.columns]
    if missing:
        raise DataError("trace lacks injection columns: {0}".format(', '.join(missing)))
    p_kw = frame[p_cols].to_numpy(dtype=float)
    q_kvar = frame[q_cols].to_numpy(dtype=float)
    steps = frame['step'].to_numpy(dtype=int)
    reports = [
        audit_constraints(network, InjectionVector.from_kw(network, p_kw[k], q_kvar[k]), limits,
                          step=int(steps[k]), tolerance=tolerance)
        for k in range(len(frame))
    ]
    count = sum(len(report.violations) for report in reports)
    if count:
        logger.warning("audit found violations=%d over steps=%d", count, len(reports))
    return reports


def audit_frame(reports):
    """Violations of audit reports as a table, one row per violation."""
    rows = [
        {
            'step': report.step,
            'kind': violation.kind,
            'element': violation.element,
            'value': violation.value,
            'limit': violation.limit,
            'magnitude': violation.magnitude,
        }
        for report in reports for violation in report.violations
    ]
    return pd.DataFrame(rows, columns=['step', 'kind', 'element', 'value', 'limit', 'magnitude'])


def sweep_lambda(network, scenarios, resources, limits, pf, lambdas, deviation='complex', solver_config=None,
                 day_id=None):
    """Day-ahead plan quality over a list of battery weights.

    The scenario linearization is shared by all weights.

    Returns:
        DataFrame with one row per weight: lambda, mrmse, mode, objective,
        iterations.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise DataError("lambda sweep needs at least one value")
    if any(value < 0 for value in lambdas):
        raise DataError("lambda values must be non-negative")
    models = linearize_per_scenario(network, scenarios)
    rows = []
    for value in lambdas:
        dayahead = build_dayahead(network, scenarios, resources, limits, pf, float(value), models=models,
                                  deviation=deviation, day_id=day_id)
        solution = solve_dayahead(dayahead, solver_config, metadata={'lambda': value})
        score = plan_reliability_mrmse(solution.plan, solution.p0)
        logger.info("lambda sweep lambda=%g mrmse=%.4f mode=%s", value, score.value, score.mode)
        rows.append({
            'lambda': float(value),
            'mrmse': score.value,
            'mode': score.mode,
            'objective': solution.objective,
            'iterations': solution.diagnostics['iterations'],
        })
    return pd.DataFrame(rows)


def sweep_bess(plan, realization, network, resources, counts, buses, settings=None):
    """Closed-loop runs with the battery split into identical distributed units.

    Returns:
        (summary, times): one summary row per count, and the per-step compute
        time of every resource in long format (count, step, resource, seconds).
    """
    counts = list(counts)
    if not counts:
        raise DataError("bess sweep needs at least one count")
    if len(resources.batteries) != 1:
        raise DataError("bess sweep splits exactly one battery, found {0}".format(len(resources.batteries)))
    for count in counts:
        if count < 1:
            raise DataError("bess count must be at least 1, got {0}".format(count))
        if count > len(buses):
            raise DataError("bess count {0} exceeds the {1} buses available for units".format(count, len(buses)))
    base = resources.batteries[0]
    rows = []
    times = []
    for count in counts:
        units = base.split(count, list(buses)) if count > 1 else [base]
        trace = run_closed_loop(plan, realization, network, resources.with_batteries(units), 'distributed',
                                settings)
        metrics = compute_metrics(trace, plan)
        timings = trace.timings
        unit_columns = ['time_{0}_s'.format(u.name) for u in units]
        rows.append({
            'count': count,
            'rmse': metrics.rmse,
            'mean': metrics.mean,
            'mae': metrics.mae,
            'mode': metrics.mode,
            'iterations_mean': metrics.iterations_mean,
            'iterations_sd': metrics.iterations_sd,
            'iterations_max': metrics.iterations_max,
            'step_time_mean_s': metrics.parallel_time_mean_s,
            'step_time_max_s': metrics.parallel_time_max_s,
            'unit_time_mean_s': float(timings[unit_columns].to_numpy().mean()),
        })
        for name in resources.with_batteries(units).names:
            column = 'time_{0}_s'.format(name)
            times.append(pd.DataFrame({
                'count': count,
                'step': timings['step'].to_numpy(),
                'resource': name,
                'seconds': timings[column].to_numpy(dtype=float),
            }))
        logger.info("bess sweep count=%d rmse=%.4f iterations_mean=%.2f", count, metrics.rmse,
                    metrics.iterations_mean)
    return pd.DataFrame(rows), pd.concat(times, ignore_index=True)

