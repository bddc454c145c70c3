#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
One control step of the real-time layer, centralized or by ADMM sharing.

Trajectories of the controllable resources are arrays of shape
(resources, horizon, 2) holding (p, q) in kW/kVAr, resources ordered as in
``ResourceSet.controllable``. The coupling constraints (dispatch tracking,
GCP power factor, voltage and ampacity) live in the aggregator; each agent
only knows its own capability set and cost.

Scaled-form iteration, per ADMM round:

    x_r <- argmin f_r(x) + rho/2 |x - z_r + u_r|^2   over the resource set
    z   <- argmin g(z) + rho/2 sum |x_r - z_r + u_r|^2 over the grid set
    u_r <- u_r + x_r - z_r
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from feederdispatch.convex_core import ProblemBuilder, SolverConfig, SolverStatus, solve
from feederdispatch.errors import DataError, SolverFailure
from feederdispatch.resources import (
    BatteryDayAheadBlocks,
    add_pv_block,
    battery_rt_problem,
    battery_rt_update,
    pv_cost,
    pv_rt_problem,
    pv_rt_update,
)

logger = logging.getLogger(__name__)

FEASIBILITY_TOLERANCE = 1e-9
SLACK_ACTIVE_KW = 1e-6


@dataclass(frozen=True)
class Horizon:
    """Steps [start, stop) of the rolling optimization window."""

    start: int
    stop: int

    def __post_init__(self):
        if not self.start < self.stop:
            raise DataError("horizon needs start < stop, got {0} and {1}".format(self.start, self.stop))

    @property
    def length(self):
        return self.stop - self.start

    @classmethod
    def starting(cls, step, length, total):
        """Window of ``length`` steps from ``step``, truncated at the end of the day."""
        return cls(step, min(step + length, total))


@dataclass(frozen=True, eq=False)
class StepInputs:
    """Everything the controller needs for one step.

    Uncontrolled forecasts are per non-slack bus in injection order (kW).
    """

    horizon: Horizon
    plan_p_kw: np.ndarray
    unc_p_kw: np.ndarray
    unc_q_kvar: np.ndarray
    pv_potential_kw: dict
    battery_states: dict
    lin: object
    limits: object
    pf: object

    def __post_init__(self):
        length = self.horizon.length
        if np.shape(self.plan_p_kw) != (length,):
            raise DataError("plan window has shape {0}, horizon is {1}".format(np.shape(self.plan_p_kw), length))
        for key in ('unc_p_kw', 'unc_q_kvar'):
            value = np.asarray(getattr(self, key), dtype=float)
            if value.shape != (length, self.lin.n_pq):
                raise DataError("{0} has shape {1}, expected {2}".format(key, value.shape, (length, self.lin.n_pq)))
            object.__setattr__(self, key, value)
        for name, values in self.pv_potential_kw.items():
            if np.shape(values) != (length,):
                raise DataError("PV potential of {0} does not cover the horizon".format(name))


@dataclass(frozen=True)
class PenaltyPolicy:
    mu: float = 10.0
    tau_incr: float = 2.0
    tau_decr: float = 2.0
    rho_initial: float = 1.0
    rho_min: float = 1e-4
    rho_max: float = 1e4

    def __post_init__(self):
        if not self.mu > 1:
            raise DataError("admm.mu must exceed 1, got {0}".format(self.mu))
        if self.tau_incr < 1 or self.tau_decr < 1:
            raise DataError("admm.tau_incr and admm.tau_decr must be at least 1")
        if not 0 < self.rho_min <= self.rho_initial <= self.rho_max:
            raise DataError("admm.rho must lie in [rho_min, rho_max] and be positive")


@dataclass(frozen=True)
class AdmmConfig:
    abs_tol: float = 1e-4
    rel_tol: float = 1e-3
    max_iter: int = 50
    policy: PenaltyPolicy = field(default_factory=PenaltyPolicy)

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol < 0:
            raise DataError("admm tolerances must be positive")
        if self.max_iter < 1:
            raise DataError("admm.max_iter must be at least 1")


@dataclass(frozen=True, eq=False)
class AdmmState:
    """Trajectories x, z, scaled duals u (resources, horizon, 2) and the penalty."""

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    rho: float
    iteration: int = 0

    def __post_init__(self):
        if not (np.shape(self.x) == np.shape(self.z) == np.shape(self.u)):
            raise DataError("ADMM trajectories differ in shape")
        if np.ndim(self.x) != 3 or np.shape(self.x)[2] != 2:
            raise DataError("ADMM trajectories must have shape (resources, horizon, 2)")
        if not self.rho > 0:
            raise DataError("ADMM penalty must be positive")

    @classmethod
    def zeros(cls, resources, length, rho):
        shape = (resources, length, 2)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), rho)

    @property
    def y(self):
        """Unscaled duals rho * u."""
        return self.rho * self.u

    def with_penalty(self, rho):
        """Change rho keeping y = rho * u unchanged."""
        return replace(self, u=self.u * (self.rho / rho), rho=rho)

    def shifted(self, length):
        """Drop the first step, hold the last one, fit to ``length`` steps."""

        def shift(values):
            moved = np.concatenate([values[:, 1:], values[:, -1:]], axis=1)
            if moved.shape[1] >= length:
                return moved[:, :length]
            pad = np.repeat(moved[:, -1:], length - moved.shape[1], axis=1)
            return np.concatenate([moved, pad], axis=1)

        return replace(self, x=shift(self.x), z=shift(self.z), u=shift(self.u), iteration=0)


@dataclass(frozen=True)
class ConvergenceReport:
    primal: float
    dual: float
    eps_primal: float
    eps_dual: float
    converged: bool
    iterations: int
    history: tuple = field(default=(), repr=False)


@dataclass(frozen=True, eq=False)
class AdmmResult:
    x: np.ndarray
    z: np.ndarray
    state: AdmmState
    report: ConvergenceReport
    objective: float
    agent_times: dict
    aggregator_times: tuple
    soft_active: bool = False

    def first_setpoints(self, names):
        return {name: (float(self.x[r, 0, 0]), float(self.x[r, 0, 1])) for r, name in enumerate(names)}


@dataclass(frozen=True, eq=False)
class CentralizedResult:
    x: np.ndarray
    objective: float
    iterations: int
    soft_active: bool
    solution: object

    def first_setpoints(self, names):
        return {name: (float(self.x[r, 0, 0]), float(self.x[r, 0, 1])) for r, name in enumerate(names)}


class BatteryAgent:
    """Battery-side prox operator: projection onto the battery set."""

    def __init__(self, params, state, solver_config=None):
        self.params = params
        self.state = state
        self.solver_config = solver_config
        self.name = params.name

    def update(self, target, rho):
        return battery_rt_update(self.params, self.state, target, rho, self.solver_config)

    def problem(self, target, rho):
        return battery_rt_problem(self.params, self.state, target, rho)

    def cost(self, x):
        return 0.0


class PvAgent:
    """PV-side prox operator with curtailment cost."""

    def __init__(self, params, potential):
        self.params = params
        self.potential = np.asarray(potential, dtype=float)
        self.name = params.name

    def update(self, target, rho):
        return pv_rt_update(self.params, self.potential, target, rho)

    def problem(self, target, rho):
        return pv_rt_problem(self.params, self.potential, target, rho)

    def cost(self, x):
        return pv_cost(self.potential, x)


def build_agents(inputs, resources, solver_config=None):
    agents = [BatteryAgent(b, inputs.battery_states[b.name], solver_config) for b in resources.batteries]
    agents += [PvAgent(g, inputs.pv_potential_kw[g.name]) for g in resources.pv_plants]
    return agents


class AggregatorProblem:
    """Coupling constraints of one control step over the copied trajectories z.

    Per step t, with z_t = [p_1, q_1, p_2, q_2, ...]:
        dispatch:  a_t . z_t = plan_t - c_p(t)
        PF:        |c_q(t) + b_t . z_t| <= tan(theta_m) |plan_t|
        grid:      voltage band and ampacity rows of the linear model
    ``soft_weight`` adds L1-penalised slacks to the dispatch and PF rows.
    """

    def __init__(self, inputs, resources, network, soft_weight=None, solver_config=None):
        lin = inputs.lin
        n = lin.n_pq
        kw_per_pu = network.kw_per_pu
        self.length = inputs.horizon.length
        self.names = resources.names
        self.n_resources = len(self.names)
        self.soft_weight = soft_weight
        self.solver_config = solver_config or SolverConfig()

        positions = [network.pq_position(item.bus) for item in resources.controllable]
        cols = np.array([[k, n + k] for k in positions], dtype=int).reshape(-1)

        unc = np.hstack([inputs.unc_p_kw, inputs.unc_q_kvar]) / kw_per_pu
        loss = unc @ lin.a_l.T + lin.b_l
        self.const_p = -inputs.unc_p_kw.sum(axis=1) + kw_per_pu * loss[:, 0]
        self.const_q = -inputs.unc_q_kvar.sum(axis=1) + kw_per_pu * loss[:, 1]
        own = np.tile([-1.0, 0.0], self.n_resources)
        own_q = np.tile([0.0, -1.0], self.n_resources)
        self.a_dispatch = own + lin.a_l[0, cols]
        self.a_reactive = own_q + lin.a_l[1, cols]
        self.plan = np.asarray(inputs.plan_p_kw, dtype=float)
        self.b_dispatch = self.plan - self.const_p
        q_cap = inputs.pf.tan_theta * np.abs(self.plan)

        v_unc = unc @ lin.a_v.T + lin.b_v
        i_unc = unc @ lin.a_i.T + lin.b_i
        coef_v = lin.a_v[:, cols] / kw_per_pu
        coef_i = lin.a_i[:, cols] / kw_per_pu
        limits = inputs.limits
        length = self.length

        # PF rows first, then grid rows; one coefficient row per (step, constraint)
        pf_steps = np.repeat(np.arange(length), 2)
        pf_coef = np.tile(np.vstack([self.a_reactive, -self.a_reactive]), (length, 1))
        pf_rhs = np.column_stack([q_cap - self.const_q, q_cap + self.const_q]).reshape(-1)
        grid_coef = np.vstack([coef_v, -coef_v, coef_i])
        grid_rhs = np.hstack([limits.v_max - v_unc, v_unc - limits.v_min, limits.i_max - i_unc])
        self.n_pf_rows = pf_rhs.size
        self.in_steps = np.concatenate([pf_steps, np.repeat(np.arange(length), grid_coef.shape[0])])
        self.in_coef = np.vstack([pf_coef, np.tile(grid_coef, (length, 1))])
        self.in_rhs = np.concatenate([pf_rhs, grid_rhs.reshape(-1)])
        self.soft_active = False

    def _flat(self, traj):
        """(R, H, 2) to (H, 2R) in z_t order."""
        return np.transpose(traj, (1, 0, 2)).reshape(self.length, -1)

    def _unflat(self, flat):
        return np.transpose(flat.reshape(self.length, self.n_resources, 2), (1, 0, 2))

    def inequality_values(self, traj):
        flat = self._flat(traj)
        return np.sum(self.in_coef * flat[self.in_steps], axis=1) - self.in_rhs

    def dispatch_residual(self, traj):
        return self._flat(traj) @ self.a_dispatch - self.b_dispatch

    def add_rows(self, builder, index):
        """Add the coupling rows over variables ``index`` (R, H, 2) to a builder."""
        flat_idx = self._flat(index)
        weight = self.soft_weight
        if weight is None:
            builder.add_equalities(flat_idx, self.a_dispatch[None, :], self.b_dispatch)
            builder.add_inequalities(flat_idx[self.in_steps], self.in_coef, self.in_rhs)
            return
        up = builder.add_variables('slack.dispatch.up', self.length, 0.0, np.inf)
        down = builder.add_variables('slack.dispatch.down', self.length, 0.0, np.inf)
        builder.add_equalities(
            np.column_stack([flat_idx, up, down]),
            np.concatenate([self.a_dispatch, [1.0, -1.0]])[None, :],
            self.b_dispatch,
        )
        pf = builder.add_variables('slack.pf', self.n_pf_rows, 0.0, np.inf)
        n_pf = self.n_pf_rows
        builder.add_inequalities(
            np.column_stack([flat_idx[self.in_steps[:n_pf]], pf]),
            np.column_stack([self.in_coef[:n_pf], -np.ones(n_pf)]),
            self.in_rhs[:n_pf],
        )
        builder.add_inequalities(flat_idx[self.in_steps[n_pf:]], self.in_coef[n_pf:], self.in_rhs[n_pf:])
        builder.add_linear(np.concatenate([up, down, pf]), weight)

    def _projection(self, w, rho):
        """Closed-form projection onto the dispatch rows; None when another row binds."""
        flat = self._flat(w)
        norm_sq = self.a_dispatch @ self.a_dispatch
        excess = (flat @ self.a_dispatch - self.b_dispatch) / norm_sq
        if self.soft_weight is not None and np.any(rho * np.abs(excess) > self.soft_weight):
            return None
        z = flat - excess[:, None] * self.a_dispatch[None, :]
        z = self._unflat(z)
        if np.any(self.inequality_values(z) > FEASIBILITY_TOLERANCE * (1.0 + np.abs(self.in_rhs))):
            return None
        return z

    def problem(self, w, rho):
        builder = ProblemBuilder()
        index = builder.add_variables('z', w.size).reshape(w.shape)
        builder.add_squares(index.reshape(-1, 1), 1.0, -w.reshape(-1), rho / 2.0)
        self.add_rows(builder, index)
        return builder.build(), index

    def update(self, w, rho):
        w = np.asarray(w, dtype=float)
        z = self._projection(w, rho)
        if z is not None:
            self.soft_active = False
            return z
        problem, index = self.problem(w, rho)
        solution = solve(problem, self.solver_config)
        if not solution.optimal:
            raise SolverFailure("aggregator update failed: {0}".format(solution.status.value), solution)
        if self.soft_weight is not None:
            slacks = np.concatenate([
                problem.block(solution.x, name) for name in ('slack.dispatch.up', 'slack.dispatch.down', 'slack.pf')
            ])
            self.soft_active = bool(np.any(slacks > SLACK_ACTIVE_KW))
        return solution.x[index]


def admm_resource_update(agent, z_r, u_r, rho):
    return agent.update(np.asarray(z_r) - np.asarray(u_r), rho)


def admm_aggregator_update(x, u, rho, aggregator):
    return aggregator.update(np.asarray(x) + np.asarray(u), rho)


def admm_dual_update(u, x, z):
    u = np.asarray(u, dtype=float)
    if not (u.shape == np.shape(x) == np.shape(z)):
        raise DataError("dual update shapes differ: {0}, {1}, {2}".format(u.shape, np.shape(x), np.shape(z)))
    return u + np.asarray(x) - np.asarray(z)


def adapt_penalty(rho, primal, dual, policy):
    """Residual balancing: grow rho when the primal residual dominates, shrink it in the opposite case."""
    if not rho > 0:
        raise DataError("penalty rho must be positive")
    if primal > policy.mu * dual:
        rho = rho * policy.tau_incr
    elif dual > policy.mu * primal:
        rho = rho / policy.tau_decr
    return float(min(max(rho, policy.rho_min), policy.rho_max))


def sequential_updates(agents, targets, rho):
    """Reference executor: agent updates in order, with their wall times."""
    results = []
    for agent, target in zip(agents, targets):
        started = time.perf_counter()
        x = agent.update(target, rho)
        results.append((x, time.perf_counter() - started))
    return results


def _tolerances(config, x, z, u, rho):
    root = math.sqrt(x.size)
    eps_primal = root * config.abs_tol + config.rel_tol * max(np.linalg.norm(x), np.linalg.norm(z))
    eps_dual = root * config.abs_tol + config.rel_tol * rho * np.linalg.norm(u)
    return eps_primal, eps_dual


def run_admm(agents, aggregator, config=None, state=None, map_updates=None):
    """Iterate resource, aggregator and dual updates until both residuals are small.

    Args:
        agents: objects with ``update(target, rho)`` and ``cost(x)``, in resource order.
        aggregator: AggregatorProblem.
        config: AdmmConfig.
        state: optional warm start AdmmState.
        map_updates: callable(agents, targets, rho) -> [(x, seconds)], defaults
            to ``sequential_updates``.

    Returns:
        AdmmResult; when max_iter is reached the iterate with the smallest
        scaled residual is returned with ``converged`` False.
    """
    config = config or AdmmConfig()
    map_updates = map_updates or sequential_updates
    shape = (len(agents), aggregator.length, 2)
    if state is None or state.x.shape != shape:
        state = AdmmState.zeros(len(agents), aggregator.length, config.policy.rho_initial)
    x, z, u, rho = state.x, state.z, state.u, state.rho

    agent_times = {agent.name: [] for agent in agents}
    aggregator_times = []
    history = []
    best = None
    report = None
    for iteration in range(1, config.max_iter + 1):
        results = map_updates(agents, [z[r] - u[r] for r in range(len(agents))], rho)
        x = np.stack([item[0] for item in results])
        for agent, item in zip(agents, results):
            agent_times[agent.name].append(item[1])

        started = time.perf_counter()
        z_next = admm_aggregator_update(x, u, rho, aggregator)
        aggregator_times.append(time.perf_counter() - started)
        u = admm_dual_update(u, x, z_next)

        primal = float(np.linalg.norm(x - z_next))
        dual = float(rho * np.linalg.norm(z_next - z))
        z = z_next
        eps_primal, eps_dual = _tolerances(config, x, z, u, rho)
        history.append((primal, dual, rho))
        merit = max(primal / eps_primal, dual / eps_dual)
        converged = primal <= eps_primal and dual <= eps_dual
        report = ConvergenceReport(primal, dual, eps_primal, eps_dual, converged, iteration)
        if best is None or merit < best[0]:
            best = (merit, x, z, u, rho, report)
        if converged:
            break
        new_rho = adapt_penalty(rho, primal, dual, config.policy)
        if new_rho != rho:
            u = u * (rho / new_rho)
            rho = new_rho

    if not report.converged:
        _, x, z, u, rho, report = best
        logger.warning(
            "admm not converged iterations=%d primal=%.3g dual=%.3g, using best iterate",
            config.max_iter, report.primal, report.dual,
        )
        report = replace(report, iterations=config.max_iter)
    report = replace(report, history=tuple(history))
    objective = float(sum(agent.cost(x[r]) for r, agent in enumerate(agents)))
    if aggregator.soft_active:
        logger.warning("soft tracking active: dispatch or power-factor slack in use")
    logger.debug("admm iterations=%d converged=%s rho=%.3g", report.iterations, report.converged, rho)
    return AdmmResult(
        x=x,
        z=z,
        state=AdmmState(x=x, z=z, u=u, rho=rho, iteration=report.iterations),
        report=report,
        objective=objective,
        agent_times={name: tuple(times) for name, times in agent_times.items()},
        aggregator_times=tuple(aggregator_times),
        soft_active=aggregator.soft_active,
    )


def build_centralized(inputs, resources, network, soft_weight=None):
    """All resources and the coupling rows in one ConvexProblem.

    Returns:
        (ConvexProblem, index) with ``index`` of shape (resources, horizon, 2).
    """
    builder = ProblemBuilder()
    length = inputs.horizon.length
    index = np.zeros((len(resources.controllable), length, 2), dtype=int)
    r = 0
    for battery in resources.batteries:
        block = BatteryDayAheadBlocks(
            battery, inputs.battery_states[battery.name].soe_kwh, length
        ).add_constraints(builder, 'battery.{0}'.format(battery.name))
        index[r, :, 0], index[r, :, 1] = block.p, block.q
        r += 1
    for plant in resources.pv_plants:
        p, q = add_pv_block(builder, plant, inputs.pv_potential_kw[plant.name], 'pv.{0}'.format(plant.name))
        index[r, :, 0], index[r, :, 1] = p, q
        r += 1
    aggregator = AggregatorProblem(inputs, resources, network, soft_weight=soft_weight)
    aggregator.add_rows(builder, index)
    return builder.build(), index


def solve_centralized(inputs, resources, network, soft_weight=None, solver_config=None, x0=None):
    problem, index = build_centralized(inputs, resources, network, soft_weight=soft_weight)
    solution = solve(problem, solver_config or SolverConfig(), x0=x0)
    if not solution.optimal:
        if solution.status is SolverStatus.INFEASIBLE:
            message = "centralized step infeasible: dispatch target beyond aggregate flexibility"
        else:
            message = "centralized step not solved: {0}".format(solution.status.value)
        raise SolverFailure(message, solution)
    soft_active = False
    if soft_weight is not None:
        slacks = np.concatenate([
            problem.block(solution.x, name) for name in ('slack.dispatch.up', 'slack.dispatch.down', 'slack.pf')
        ])
        soft_active = bool(np.any(slacks > SLACK_ACTIVE_KW))
        if soft_active:
            logger.warning("soft tracking active in centralized step")
    return CentralizedResult(
        x=solution.x[index],
        objective=solution.objective,
        iterations=solution.iterations,
        soft_active=soft_active,
        solution=solution,
    )
