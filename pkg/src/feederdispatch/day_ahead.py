#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Stochastic day-ahead scheduling.

One convex problem covers every scenario and step. The dispatch plan is the
pair (p_disp, q_disp) shared by all scenarios; each scenario carries its own
battery trajectories and its own split of the GCP power into import/export
parts. The GCP power of a scenario is affine in the battery setpoints through
the loss sensitivities linearized at the scenario's uncontrolled point:

    p0 = -sum(p_unc) - sum(p_b) + p_loss(inj)

PV plants enter through their potential scenarios and are not scheduled.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from feederdispatch.convex_core import ProblemBuilder, SolverConfig, solve
from feederdispatch.errors import DataError, PowerFlowDivergence, SolverFailure
from feederdispatch.grid_model import InjectionVector, build_admittance, compute_sensitivities, solve_power_flow
from feederdispatch.resources import battery_dayahead_blocks
from feederdispatch.timegrid import STEP_SECONDS, day_index, format_timestamps

logger = logging.getLogger(__name__)

PRESOLVE_MARGIN = 1e-9
NEAR_ZERO_MEAN_RATIO = 0.01
DEVIATIONS = ('complex', 'real')


@dataclass(frozen=True)
class PfLimit:
    """Minimum power factor at the GCP and the import/export exclusivity weight."""

    cos_theta_min: float = 0.95
    nu: float = 1e-3

    def __post_init__(self):
        if not 0 < self.cos_theta_min <= 1:
            raise DataError("cos_theta_min must lie in (0, 1], got {0}".format(self.cos_theta_min))
        if self.nu < 0:
            raise DataError("nu must be non-negative, got {0}".format(self.nu))

    @property
    def theta_m(self):
        return math.acos(self.cos_theta_min)

    @property
    def tan_theta(self):
        """Largest |q| / |p| ratio allowed."""
        return math.tan(self.theta_m)

    @property
    def k(self):
        """tan(pi/2 - theta_m); infinite at unity power factor."""
        if self.theta_m == 0:
            return math.inf
        return 1.0 / self.tan_theta


@dataclass(frozen=True, eq=False)
class DispatchPlan:
    """GCP active-power plan (kW) with the scheduled reactive power (kVAr)."""

    timestamps: tuple
    p_disp_kw: np.ndarray
    q_disp_kvar: np.ndarray
    resolution_s: int = STEP_SECONDS
    metadata: dict = field(default_factory=dict)

    COLUMNS = ('timestamp_utc', 'p_disp_kw', 'q_disp_kvar')

    def __post_init__(self):
        p = np.array(self.p_disp_kw, dtype=float).reshape(-1)
        q = np.array(self.q_disp_kvar, dtype=float).reshape(-1)
        timestamps = tuple(self.timestamps)
        if not (p.size == q.size == len(timestamps)):
            raise DataError("plan columns differ in length: {0}, {1}, {2}".format(len(timestamps), p.size, q.size))
        if p.size == 0:
            raise DataError("a dispatch plan needs at least one step")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise DataError("dispatch plan values must be finite")
        object.__setattr__(self, 'timestamps', timestamps)
        object.__setattr__(self, 'p_disp_kw', p)
        object.__setattr__(self, 'q_disp_kvar', q)

    def __len__(self):
        return self.p_disp_kw.size

    def window(self, start, length):
        """Plan values over [start, start + length), truncated at the end of the plan."""
        stop = min(start + length, len(self))
        return self.p_disp_kw[start:stop], self.q_disp_kvar[start:stop]

    def to_frame(self):
        return pd.DataFrame({
            'timestamp_utc': list(self.timestamps),
            'p_disp_kw': self.p_disp_kw,
            'q_disp_kvar': self.q_disp_kvar,
        })

    @classmethod
    def from_frame(cls, frame, metadata=None):
        missing = [c for c in cls.COLUMNS if c not in frame.columns]
        if missing:
            raise DataError("plan lacks columns: {0}".format(', '.join(missing)))
        return cls(
            timestamps=frame['timestamp_utc'].astype(str).tolist(),
            p_disp_kw=frame['p_disp_kw'].to_numpy(dtype=float),
            q_disp_kvar=frame['q_disp_kvar'].to_numpy(dtype=float),
            metadata=dict(metadata or {}),
        )


@dataclass(frozen=True, eq=False)
class ScenarioGcp:
    """Affine GCP power of one scenario: p0 = const_p + coef_p . x[cols]."""

    cols: np.ndarray
    coef_p: np.ndarray
    const_p: np.ndarray
    coef_q: np.ndarray
    const_q: np.ndarray

    def evaluate(self, x):
        values = x[self.cols] if self.cols.shape[1] else np.zeros_like(self.coef_p)
        p0 = self.const_p + np.sum(self.coef_p * values, axis=1)
        q0 = self.const_q + np.sum(self.coef_q * values, axis=1)
        return p0, q0


@dataclass(frozen=True, eq=False)
class DayAheadProblem:
    problem: object
    timestamps: tuple
    battery_names: tuple
    blocks: dict
    gcp: tuple
    plus: tuple
    minus: tuple
    pf: PfLimit
    deviation: str
    presolve: dict


@dataclass(frozen=True, eq=False)
class DayAheadSolution:
    plan: DispatchPlan
    batteries: dict
    p0: np.ndarray
    q0: np.ndarray
    p_plus: np.ndarray
    p_minus: np.ndarray
    objective: float
    diagnostics: dict

    def battery_frame(self, name):
        """Long-format trajectories of one battery: scenario, step, p, q, soe."""
        data = self.batteries[name]
        s, steps = data['p'].shape
        return pd.DataFrame({
            'scenario': np.repeat(np.arange(s), steps),
            'step': np.tile(np.arange(steps), s),
            'p_kw': data['p'].reshape(-1),
            'q_kvar': data['q'].reshape(-1),
            'soe_kwh': data['soe'].reshape(-1),
        })


@dataclass(frozen=True)
class ReliabilityScore:
    value: float
    mode: str
    per_scenario: tuple = ()


@dataclass(frozen=True)
class ReplayReport:
    scenario: int
    max_voltage_excess_pu: float
    max_current_excess_ratio: float
    p0_kw: np.ndarray = field(repr=False, default=None)


def _linearize_point(network, ybus, p_pu, q_pu, t):
    state = solve_power_flow(network, InjectionVector(p_pu, q_pu), ybus=ybus)
    return compute_sensitivities(network, state, t=t, ybus=ybus)


def linearize_per_scenario(network, scenarios, executor=None):
    """Sensitivity models at every (scenario, step) uncontrolled operating point.

    Repeated operating points share one model object.

    Returns:
        list over scenarios of lists over steps of LinearGridModel.
    """
    mapping = network.injection_map(scenarios.buses)
    p_pu = network.to_pu(scenarios.p_kw @ mapping)
    q_pu = network.to_pu(scenarios.q_kvar @ mapping)
    ybus = build_admittance(network)

    first_seen = {}
    keys = np.empty((scenarios.n_scenarios, scenarios.horizon), dtype=object)
    for w in range(scenarios.n_scenarios):
        for t in range(scenarios.horizon):
            key = p_pu[w, t].tobytes() + q_pu[w, t].tobytes()
            keys[w, t] = key
            first_seen.setdefault(key, (w, t))

    def linearize(key):
        w, t = first_seen[key]
        try:
            return _linearize_point(network, ybus, p_pu[w, t], q_pu[w, t], t)
        except PowerFlowDivergence as exc:
            raise PowerFlowDivergence(
                "power flow diverged at scenario {0} step {1}: {2}".format(w, t, exc),
                mismatch=exc.mismatch, iterations=exc.iterations,
            ) from exc

    unique = list(first_seen)
    mapper = executor.map if executor is not None else map
    models = dict(zip(unique, mapper(linearize, unique)))
    logger.info("linearized scenarios=%d steps=%d points=%d", scenarios.n_scenarios, scenarios.horizon, len(unique))
    return [[models[keys[w, t]] for t in range(scenarios.horizon)] for w in range(scenarios.n_scenarios)]


def _stack(models):
    a_v = np.stack([m.a_v for m in models])
    a_i = np.stack([m.a_i for m in models])
    a_l = np.stack([m.a_l for m in models])
    inj = np.stack([m.injection.stacked() for m in models])
    v0 = np.einsum('tij,tj->ti', a_v, inj) + np.stack([m.b_v for m in models])
    i0 = np.einsum('tij,tj->ti', a_i, inj) + np.stack([m.b_i for m in models])
    loss0 = np.einsum('tij,tj->ti', a_l, inj) + np.stack([m.b_l for m in models])
    return a_v, a_i, a_l, v0, i0, loss0


def _limit_rows(builder, cols, coef, base, lower, upper, bound):
    """Rows lower <= base + coef . x <= upper that can bind inside the capability disks.

    Returns the number of rows added.
    """
    added = 0
    if np.isfinite(upper).any():
        tt, ii = np.nonzero(base + bound >= upper - PRESOLVE_MARGIN)
        if tt.size:
            builder.add_inequalities(cols[tt], coef[tt, ii], upper[ii] - base[tt, ii])
            added += tt.size
    if lower is not None:
        tt, ii = np.nonzero(base - bound <= lower + PRESOLVE_MARGIN)
        if tt.size:
            builder.add_inequalities(cols[tt], -coef[tt, ii], base[tt, ii] - lower[ii])
            added += tt.size
    return added


def build_dayahead(network, scenarios, resources, limits, pf, weights, models=None, deviation='complex',
                   initial_soe=None, day_id=None, executor=None):
    """Assemble the day-ahead ConvexProblem.

    Args:
        network: NetworkModel.
        scenarios: ScenarioSet of uncontrolled injections (kW).
        resources: ResourceSet; its batteries are scheduled.
        limits: GridLimits (per unit).
        pf: PfLimit.
        weights: mapping battery name -> λ (or a scalar for all).
        models: linearize_per_scenario output, computed when omitted.
        deviation: 'complex' tracks p and q, 'real' tracks p only.
        initial_soe: optional mapping battery name -> kWh.
        day_id: target day, used for the plan timestamps.

    Returns:
        DayAheadProblem
    """
    if deviation not in DEVIATIONS:
        raise DataError("deviation must be one of {0}, got {1!r}".format('|'.join(DEVIATIONS), deviation))
    if models is None:
        models = linearize_per_scenario(network, scenarios, executor=executor)
    s, horizon = scenarios.n_scenarios, scenarios.horizon
    if len(models) != s or any(len(row) != horizon for row in models):
        raise DataError("linear models do not match the {0} x {1} scenario grid".format(s, horizon))
    if limits.i_max.size != network.n_lines:
        raise DataError("limits cover {0} lines, network has {1}".format(limits.i_max.size, network.n_lines))

    n = network.n_pq
    kw_per_pu = network.kw_per_pu
    batteries = resources.batteries
    positions = [network.pq_position(b.bus) for b in batteries]
    ratings = np.array([b.rating_kva for b in batteries])
    initial_soe = initial_soe or {}

    builder = ProblemBuilder()
    disp_p = builder.add_variables('plan.p', horizon)
    disp_q = builder.add_variables('plan.q', horizon)
    ones = np.ones(horizon)
    tan_theta = pf.tan_theta

    blocks = {}
    gcp = []
    plus_blocks = []
    minus_blocks = []
    presolve = {'voltage_rows': 0, 'current_rows': 0, 'candidate_rows': 0}
    for w in range(s):
        a_v, a_i, a_l, v0, i0, loss0 = _stack(models[w])
        col_list = []
        coef_p = []
        coef_q = []
        coef_v = []
        coef_i = []
        for b, k in zip(batteries, positions):
            add_cost, add_constraints = battery_dayahead_blocks(
                b, initial_soe.get(b.name, b.initial_soe), horizon)
            block = add_constraints(builder, 'battery.{0}.{1}'.format(b.name, w))
            weight = weights.get(b.name, 0.0) if isinstance(weights, dict) else float(weights)
            add_cost(builder, block, weight)
            blocks[(b.name, w)] = block
            col_list.extend([block.p, block.q])
            coef_p.extend([-1.0 + a_l[:, 0, k], a_l[:, 0, n + k]])
            coef_q.extend([a_l[:, 1, k], -1.0 + a_l[:, 1, n + k]])
            coef_v.extend([a_v[:, :, k] / kw_per_pu, a_v[:, :, n + k] / kw_per_pu])
            coef_i.extend([a_i[:, :, k] / kw_per_pu, a_i[:, :, n + k] / kw_per_pu])

        if col_list:
            cols = np.column_stack(col_list)
            coef_p = np.column_stack(coef_p)
            coef_q = np.column_stack(coef_q)
        else:
            cols = np.zeros((horizon, 0), dtype=int)
            coef_p = np.zeros((horizon, 0))
            coef_q = np.zeros((horizon, 0))
        const_p = -scenarios.p_kw[w].sum(axis=1) + kw_per_pu * loss0[:, 0]
        const_q = -scenarios.q_kvar[w].sum(axis=1) + kw_per_pu * loss0[:, 1]
        gcp.append(ScenarioGcp(cols=cols, coef_p=coef_p, const_p=const_p, coef_q=coef_q, const_q=const_q))

        builder.add_squares(np.column_stack([cols, disp_p]), np.column_stack([coef_p, -ones]), const_p)
        if deviation == 'complex':
            builder.add_squares(np.column_stack([cols, disp_q]), np.column_stack([coef_q, -ones]), const_q)

        plus = builder.add_variables('gcp.plus.{0}'.format(w), horizon, 0.0, np.inf)
        minus = builder.add_variables('gcp.minus.{0}'.format(w), horizon, 0.0, np.inf)
        plus_blocks.append(plus)
        minus_blocks.append(minus)
        builder.add_equalities(
            np.column_stack([plus, minus, cols]), np.column_stack([ones, -ones, -coef_p]), const_p)
        if pf.nu > 0:
            builder.add_squares(plus[:, None], 1.0, 0.0, pf.nu)
            builder.add_squares(minus[:, None], 1.0, 0.0, pf.nu)
        if tan_theta == 0:
            if cols.shape[1]:
                builder.add_equalities(cols, coef_q, -const_q)
        else:
            pf_cols = np.column_stack([cols, plus, minus])
            slope = np.column_stack([-tan_theta * ones, -tan_theta * ones])
            builder.add_inequalities(pf_cols, np.column_stack([coef_q, slope]), -const_q)
            builder.add_inequalities(pf_cols, np.column_stack([-coef_q, slope]), const_q)

        if not col_list:
            continue
        coef_v = np.stack(coef_v, axis=2)
        coef_i = np.stack(coef_i, axis=2)
        bound_v = sum(np.hypot(coef_v[:, :, 2 * j], coef_v[:, :, 2 * j + 1]) * ratings[j] for j in range(len(batteries)))
        bound_i = sum(np.hypot(coef_i[:, :, 2 * j], coef_i[:, :, 2 * j + 1]) * ratings[j] for j in range(len(batteries)))
        presolve['candidate_rows'] += 2 * v0.size + i0.size
        presolve['voltage_rows'] += _limit_rows(
            builder, cols, coef_v, v0, np.full(n, limits.v_min), np.full(n, limits.v_max), bound_v)
        presolve['current_rows'] += _limit_rows(builder, cols, coef_i, i0, None, limits.i_max, bound_i)

    problem = builder.build()
    if day_id is not None:
        timestamps = tuple(format_timestamps(day_index(day_id, horizon)))
    else:
        timestamps = tuple(str(t) for t in range(horizon))
    logger.info(
        "day-ahead problem scenarios=%d steps=%d variables=%d voltage_rows=%d current_rows=%d",
        s, horizon, problem.n, presolve['voltage_rows'], presolve['current_rows'],
    )
    return DayAheadProblem(
        problem=problem,
        timestamps=timestamps,
        battery_names=tuple(b.name for b in batteries),
        blocks=blocks,
        gcp=tuple(gcp),
        plus=tuple(plus_blocks),
        minus=tuple(minus_blocks),
        pf=pf,
        deviation=deviation,
        presolve=presolve,
    )


def solve_dayahead(dayahead, solver_config=None, metadata=None):
    """Solve and extract the plan and the per-scenario trajectories.

    Raises:
        SolverFailure: the solver did not reach an optimal status; no plan.
    """
    solution = solve(dayahead.problem, solver_config or SolverConfig())
    if not solution.optimal:
        raise SolverFailure(
            "day-ahead problem not solved to optimality: {0}".format(solution.status.value), solution)
    x = solution.x
    problem = dayahead.problem
    s = len(dayahead.gcp)

    batteries = {}
    for name in dayahead.battery_names:
        trajectories = {'p': [], 'q': [], 'soe': []}
        for w in range(s):
            block = dayahead.blocks[(name, w)]
            trajectories['p'].append(x[block.p])
            trajectories['q'].append(x[block.q])
            trajectories['soe'].append(x[block.soe])
        batteries[name] = {key: np.array(values) for key, values in trajectories.items()}

    p0 = []
    q0 = []
    for part in dayahead.gcp:
        p, q = part.evaluate(x)
        p0.append(p)
        q0.append(q)
    p0 = np.array(p0)
    q0 = np.array(q0)
    p_plus = np.array([x[idx] for idx in dayahead.plus])
    p_minus = np.array([x[idx] for idx in dayahead.minus])

    diagnostics = {
        'status': solution.status.value,
        'iterations': solution.iterations,
        'polished': solution.polished,
        'objective': solution.objective,
        'residuals': solution.residuals.to_dict(),
        'max_balance_error_kw': float(np.max(np.abs(p_plus - p_minus - p0))),
        'max_exclusivity_kw2': float(np.max(p_plus * p_minus)),
        'presolve': dict(dayahead.presolve),
    }
    logger.info(
        "day-ahead solved iterations=%d objective=%.6g exclusivity=%.3g",
        solution.iterations, solution.objective, diagnostics['max_exclusivity_kw2'],
    )
    plan = DispatchPlan(
        timestamps=dayahead.timestamps,
        p_disp_kw=problem.block(x, 'plan.p'),
        q_disp_kvar=problem.block(x, 'plan.q'),
        metadata=dict(metadata or {}),
    )
    return DayAheadSolution(
        plan=plan, batteries=batteries, p0=p0, q0=q0, p_plus=p_plus, p_minus=p_minus,
        objective=solution.objective, diagnostics=diagnostics,
    )


def normalization(plan_kw):
    """Scale for percentage error reporting, or absolute mode for near-zero-mean plans.

    Returns:
        (divisor, mode): errors are reported as 100 * error / divisor in
        'percent' mode and as kW in 'absolute' mode (divisor 1).
    """
    plan_kw = np.asarray(plan_kw, dtype=float)
    mean = float(np.mean(plan_kw)) if plan_kw.size else 0.0
    typical = float(np.mean(np.abs(plan_kw))) if plan_kw.size else 0.0
    if mean == 0.0 or abs(mean) < NEAR_ZERO_MEAN_RATIO * typical:
        logger.warning("near-zero plan mean=%.6g kW, reporting absolute errors", mean)
        return 1.0, 'absolute'
    return abs(mean), 'percent'


def plan_reliability_mrmse(plan, p0_scenarios):
    """Mean over scenarios of the RMSE between scenario GCP power and the plan.

    Args:
        plan: DispatchPlan or array of plan values (kW).
        p0_scenarios: array (s, T) of GCP active power per scenario.
    """
    plan_kw = plan.p_disp_kw if isinstance(plan, DispatchPlan) else np.asarray(plan, dtype=float)
    p0 = np.atleast_2d(np.asarray(p0_scenarios, dtype=float))
    if p0.shape[1] != plan_kw.size:
        raise DataError("scenario series cover {0} steps, plan has {1}".format(p0.shape[1], plan_kw.size))
    rmse = np.sqrt(np.mean((p0 - plan_kw[None, :]) ** 2, axis=1))
    divisor, mode = normalization(plan_kw)
    scale = 100.0 / divisor if mode == 'percent' else 1.0
    return ReliabilityScore(
        value=float(np.mean(rmse) * scale),
        mode=mode,
        per_scenario=tuple(float(v * scale) for v in rmse),
    )


def replay_scenario(network, scenarios, solution, omega, limits, resources):
    """Replay one scenario's battery trajectory through the AC power flow.

    Returns:
        ReplayReport with the largest voltage excess (pu) and the largest
        relative ampacity excess over the horizon.
    """
    if not 0 <= omega < scenarios.n_scenarios:
        raise DataError("scenario {0} out of range".format(omega))
    mapping = network.injection_map(scenarios.buses)
    p_kw = scenarios.p_kw[omega] @ mapping
    q_kvar = scenarios.q_kvar[omega] @ mapping
    for battery in resources.batteries:
        k = network.pq_position(battery.bus)
        p_kw[:, k] += solution.batteries[battery.name]['p'][omega]
        q_kvar[:, k] += solution.batteries[battery.name]['q'][omega]

    ybus = build_admittance(network)
    v_excess = 0.0
    i_excess = 0.0
    p0 = np.zeros(scenarios.horizon)
    for t in range(scenarios.horizon):
        state = solve_power_flow(network, InjectionVector.from_kw(network, p_kw[t], q_kvar[t]), ybus=ybus)
        v = state.pq_v_mag
        v_excess = max(v_excess, float(np.max(v - limits.v_max)), float(np.max(limits.v_min - v)))
        i_excess = max(i_excess, float(np.max(state.i_mag / limits.i_max - 1.0)))
        p0[t] = network.from_pu(state.p0)
    return ReplayReport(
        scenario=omega,
        max_voltage_excess_pu=max(v_excess, 0.0),
        max_current_excess_ratio=max(i_excess, 0.0),
        p0_kw=p0,
    )
