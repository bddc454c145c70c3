#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Controllable resources (battery, PV plants) and the uncontrollable load.

Parameters are immutable; battery state is passed explicitly. Power is in kW
and kVAr with positive values injected into the feeder, so a positive
battery power discharges it. Energy is in kWh.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from feederdispatch.convex_core import ProblemBuilder, SolverConfig, project_disk, solve
from feederdispatch.errors import DataError, SolverFailure

logger = logging.getLogger(__name__)

BATTERY = 'battery'
PV = 'pv'
LOAD = 'load'
RESOURCE_TYPES = (BATTERY, PV, LOAD)

CAPABILITY_TOLERANCE = 1e-9
SOE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class BatteryParams:
    name: str
    bus: str
    capacity_kwh: float
    rating_kva: float
    back_off: float = 0.1
    ts_s: float = 30.0
    efficiency: float = 1.0
    initial_soc: float = 0.5

    def __post_init__(self):
        prefix = "battery {0}".format(self.name)
        if not self.capacity_kwh > 0:
            raise DataError("{0}: capacity_kwh must be positive".format(prefix))
        if not self.rating_kva > 0:
            raise DataError("{0}: rating_kva must be positive".format(prefix))
        if not 0 <= self.back_off < 0.5:
            raise DataError("{0}: back_off must lie in [0, 0.5), got {1}".format(prefix, self.back_off))
        if not self.ts_s > 0:
            raise DataError("{0}: ts_s must be positive".format(prefix))
        if not 0 < self.efficiency <= 1:
            raise DataError("{0}: efficiency must lie in (0, 1]".format(prefix))
        if not self.back_off <= self.initial_soc <= 1 - self.back_off:
            raise DataError("{0}: initial_soc {1} outside the back-off band [{2}, {3}]".format(
                prefix, self.initial_soc, self.back_off, 1 - self.back_off))

    @property
    def soe_min(self):
        return self.back_off * self.capacity_kwh

    @property
    def soe_max(self):
        return (1.0 - self.back_off) * self.capacity_kwh

    @property
    def hours_per_step(self):
        return self.ts_s / 3600.0

    @property
    def initial_soe(self):
        return self.initial_soc * self.capacity_kwh

    def split(self, count, buses):
        """Identical units sharing this battery's rating and capacity."""
        return [
            replace(
                self,
                name='{0}-{1}'.format(self.name, k + 1),
                bus=bus,
                capacity_kwh=self.capacity_kwh / count,
                rating_kva=self.rating_kva / count,
            )
            for k, bus in enumerate(buses[:count])
        ]


@dataclass(frozen=True)
class BatteryState:
    soe_kwh: float
    capacity_kwh: float

    @property
    def soc(self):
        return self.soe_kwh / self.capacity_kwh

    @classmethod
    def initial(cls, params):
        return cls(soe_kwh=params.initial_soe, capacity_kwh=params.capacity_kwh)


@dataclass(frozen=True)
class PvParams:
    name: str
    bus: str
    rating_kva: float
    reactive_capable: bool = False

    def __post_init__(self):
        if not self.rating_kva > 0:
            raise DataError("pv {0}: rating_kva must be positive".format(self.name))


@dataclass(frozen=True)
class PvPotential:
    """Maximum generation (kW) of one plant over a horizon."""

    kw: np.ndarray

    def __post_init__(self):
        kw = np.array(self.kw, dtype=float).reshape(-1)
        if np.any(~np.isfinite(kw)) or np.any(kw < 0):
            raise DataError("PV potential must be finite and non-negative")
        kw.setflags(write=False)
        object.__setattr__(self, 'kw', kw)

    def __len__(self):
        return self.kw.size


@dataclass(frozen=True)
class LoadParams:
    name: str
    bus: str
    nominal_kva: float
    power_factor: float = 0.95

    def __post_init__(self):
        if not self.nominal_kva > 0:
            raise DataError("load {0}: nominal_kva must be positive".format(self.name))
        if not 0 < self.power_factor <= 1:
            raise DataError("load {0}: power_factor must lie in (0, 1]".format(self.name))

    @property
    def tan_phi(self):
        return math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class ResourceSet:
    batteries: tuple = ()
    pv_plants: tuple = ()
    loads: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'batteries', tuple(self.batteries))
        object.__setattr__(self, 'pv_plants', tuple(self.pv_plants))
        object.__setattr__(self, 'loads', tuple(self.loads))
        names = [item.name for item in self.batteries + self.pv_plants + self.loads]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            raise DataError("duplicate resource names: {0}".format(', '.join(duplicates)))

    @property
    def controllable(self):
        """Batteries then PV plants, the order of every per-resource array."""
        return self.batteries + self.pv_plants

    @property
    def names(self):
        return [item.name for item in self.controllable]

    def by_name(self, name):
        for item in self.batteries + self.pv_plants + self.loads:
            if item.name == name:
                return item
        raise DataError("unknown resource {0}".format(name))

    def with_batteries(self, batteries):
        return replace(self, batteries=tuple(batteries))

    def initial_states(self):
        return {b.name: BatteryState.initial(b) for b in self.batteries}


@dataclass(frozen=True)
class CapabilityReport:
    resource: str
    margin: float
    violations: tuple = field(default_factory=tuple)

    @property
    def ok(self):
        return not self.violations


def battery_soe_step(state, p_kw, params):
    """Advance the state of energy by one sampling period.

    Discharge (p > 0) removes p·Ts; charge adds efficiency·|p|·Ts.
    """
    hours = params.hours_per_step
    if p_kw >= 0:
        delta = p_kw * hours
    else:
        delta = params.efficiency * p_kw * hours
    return BatteryState(soe_kwh=state.soe_kwh - delta, capacity_kwh=state.capacity_kwh)


def soe_trajectory(params, initial_soe, p_kw):
    """Lossless SOE after each step of a power trajectory."""
    p_kw = np.asarray(p_kw, dtype=float).reshape(-1)
    return initial_soe - params.hours_per_step * np.cumsum(p_kw)


def soe_matrix(params, horizon):
    """Matrix M with SOE = initial + M p, the telescoped dynamics."""
    return -params.hours_per_step * np.tril(np.ones((horizon, horizon)))


def _check_soe(params, soe_kwh, label):
    if not params.soe_min - SOE_TOLERANCE <= soe_kwh <= params.soe_max + SOE_TOLERANCE:
        raise DataError("{0} SOE {1:.6f} kWh of battery {2} outside [{3:.6f}, {4:.6f}]".format(
            label, soe_kwh, params.name, params.soe_min, params.soe_max))


@dataclass(frozen=True)
class BatteryBlock:
    """Variable indices of one battery trajectory inside a ProblemBuilder."""

    p: np.ndarray
    q: np.ndarray
    soe: np.ndarray


class BatteryDayAheadBlocks:
    """Constraint and cost fragments of one battery over the scheduling horizon."""

    def __init__(self, params, initial_soe, horizon):
        if horizon < 1:
            raise DataError("battery horizon must be at least 1 step")
        _check_soe(params, initial_soe, 'initial')
        self.params = params
        self.initial_soe = float(initial_soe)
        self.horizon = int(horizon)

    def add_constraints(self, builder, prefix):
        params = self.params
        horizon = self.horizon
        rating = params.rating_kva
        p = builder.add_variables(prefix + '.p', horizon, -rating, rating)
        q = builder.add_variables(prefix + '.q', horizon, -rating, rating)
        soe = builder.add_variables(prefix + '.soe', horizon, params.soe_min, params.soe_max)
        h = params.hours_per_step
        # soe_t - soe_{t-1} + h p_t = 0, soe_0 fixed
        builder.add_equality([soe[0], p[0]], [1.0, h], self.initial_soe)
        if horizon > 1:
            builder.add_equalities(
                np.column_stack([soe[1:], soe[:-1], p[1:]]),
                np.array([1.0, -1.0, h]),
                np.zeros(horizon - 1),
            )
        builder.add_disks(p, q, rating)
        return BatteryBlock(p=p, q=q, soe=soe)

    def add_cost(self, builder, block, weight):
        """λ p² on every step."""
        if weight < 0:
            raise DataError("battery cost weight must be non-negative")
        if weight > 0:
            builder.add_squares(block.p[:, None], 1.0, 0.0, weight)


def battery_dayahead_blocks(params, initial_soe, horizon):
    """Return (add_cost, add_constraints) for one battery in the day-ahead problem."""
    blocks = BatteryDayAheadBlocks(params, initial_soe, horizon)
    return blocks.add_cost, blocks.add_constraints


def _target(target, horizon=None):
    target = np.asarray(target, dtype=float)
    if target.ndim != 2 or target.shape[1] != 2:
        raise DataError("targets must have shape (horizon, 2), got {0}".format(target.shape))
    if horizon is not None and target.shape[0] != horizon:
        raise DataError("target covers {0} steps, expected {1}".format(target.shape[0], horizon))
    return target


def _check_rho(rho):
    if not rho > 0:
        raise DataError("penalty rho must be positive, got {0}".format(rho))


def battery_rt_problem(params, state, target, rho):
    """Projection of the (z - u) trajectory onto the battery's feasible set.

    The battery cost is constant in the real-time layer, so only the proximal
    term remains.
    """
    _check_rho(rho)
    target = _target(target)
    _check_soe(params, state.soe_kwh, 'current')
    builder = ProblemBuilder()
    block = BatteryDayAheadBlocks(params, state.soe_kwh, target.shape[0]).add_constraints(builder, 'battery')
    builder.add_squares(block.p[:, None], 1.0, -target[:, 0], rho / 2.0)
    builder.add_squares(block.q[:, None], 1.0, -target[:, 1], rho / 2.0)
    return builder.build()


def battery_rt_update(params, state, target, rho, solver_config=None):
    """Closed-form projection when the SOE stays in band, convex solve otherwise."""
    target = _target(target)
    points = np.array([project_disk(point, params.rating_kva) for point in target]).reshape(-1, 2)
    soe = soe_trajectory(params, state.soe_kwh, points[:, 0])
    if np.all(soe >= params.soe_min - SOE_TOLERANCE) and np.all(soe <= params.soe_max + SOE_TOLERANCE):
        return points
    problem = battery_rt_problem(params, state, target, rho)
    solution = solve(problem, solver_config or SolverConfig())
    if not solution.optimal:
        raise SolverFailure("battery {0} update did not converge".format(params.name), solution)
    return np.column_stack([problem.block(solution.x, 'battery.p'), problem.block(solution.x, 'battery.q')])


def _potential(potential, horizon):
    if not isinstance(potential, PvPotential):
        potential = PvPotential(potential)
    if len(potential) != horizon:
        raise DataError("PV potential covers {0} steps, expected {1}".format(len(potential), horizon))
    return potential.kw


def pv_cost(potential, x):
    """Curtailment plus reactive-power cost (p - p̂)² + q²."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    potential = np.asarray(potential, dtype=float).reshape(-1)
    return float(np.sum((x[:, 0] - potential) ** 2 + x[:, 1] ** 2))


def add_pv_block(builder, params, potential, prefix):
    """PV capability set and curtailment cost over a horizon; returns (p, q) indices."""
    p_hat = np.asarray(potential, dtype=float).reshape(-1)
    rating = params.rating_kva
    p = builder.add_variables(prefix + '.p', p_hat.size, 0.0, np.minimum(p_hat, rating))
    q_bound = rating if params.reactive_capable else 0.0
    q = builder.add_variables(prefix + '.q', p_hat.size, -q_bound, q_bound)
    builder.add_disks(p, q, rating)
    builder.add_squares(p[:, None], 1.0, -p_hat, 1.0)
    builder.add_squares(q[:, None], 1.0, 0.0, 1.0)
    return p, q


def pv_rt_problem(params, potential, target, rho):
    """Curtailment cost plus proximal term over the PV capability set."""
    _check_rho(rho)
    target = _target(target)
    p_hat = _potential(potential, target.shape[0])
    builder = ProblemBuilder()
    p, q = add_pv_block(builder, params, p_hat, 'pv')
    builder.add_squares(p[:, None], 1.0, -target[:, 0], rho / 2.0)
    builder.add_squares(q[:, None], 1.0, -target[:, 1], rho / 2.0)
    return builder.build()


def _project_disk_slab(point, radius, p_max):
    """Projection onto {p² + q² <= r², 0 <= p <= p_max}."""
    a, b = point
    p_max = min(p_max, radius)
    if 0.0 <= a <= p_max and math.hypot(a, b) <= radius:
        return a, b
    candidates = []
    disk_point = project_disk((a, b), radius)
    if -1e-15 <= disk_point[0] <= p_max + 1e-15:
        candidates.append(disk_point)
    for line in (0.0, p_max):
        half = math.sqrt(max(radius * radius - line * line, 0.0))
        candidates.append((line, min(max(b, -half), half)))
    return min(candidates, key=lambda c: (c[0] - a) ** 2 + (c[1] - b) ** 2)


def pv_rt_update(params, potential, target, rho):
    """Closed-form minimizer of the PV prox problem, one step at a time.

    The cost is isotropic, so the minimizer is the projection of
    ((2 p̂ + ρ a) / (2 + ρ), ρ b / (2 + ρ)) onto the capability set.
    """
    _check_rho(rho)
    target = _target(target)
    p_hat = _potential(potential, target.shape[0])
    centre_p = (2.0 * p_hat + rho * target[:, 0]) / (2.0 + rho)
    centre_q = rho * target[:, 1] / (2.0 + rho)
    out = np.empty_like(target)
    rating = params.rating_kva
    for k in range(target.shape[0]):
        if params.reactive_capable:
            out[k] = _project_disk_slab((centre_p[k], centre_q[k]), rating, p_hat[k])
        else:
            out[k] = (min(max(centre_p[k], 0.0), min(p_hat[k], rating)), 0.0)
    return out


def check_capability(setpoint, params, potential=None, tolerance=CAPABILITY_TOLERANCE):
    """Margin to the capability boundary and any violations of one (p, q) setpoint."""
    p, q = float(setpoint[0]), float(setpoint[1])
    rating = params.rating_kva
    margin = rating - math.hypot(p, q)
    violations = []
    if margin < -tolerance:
        violations.append(('rating', margin))
    if isinstance(params, PvParams):
        if p < -tolerance:
            violations.append(('negative-p', p))
            margin = min(margin, p)
        if potential is not None:
            headroom = float(potential) - p
            margin = min(margin, headroom)
            if headroom < -tolerance:
                violations.append(('potential', headroom))
        if not params.reactive_capable and abs(q) > tolerance:
            violations.append(('reactive', q))
            margin = min(margin, -abs(q))
    return CapabilityReport(resource=params.name, margin=margin, violations=tuple(violations))
