#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Feeder model, exact AC power flow and the sensitivity-coefficient linearization.

The network is solved as a balanced single-phase equivalent in per unit.
Nodal injections are positive when power flows into the feeder; the slack
bus power ``s0`` is what the upstream grid injects, so that

    p0 = -sum(p_i) + p_loss,    q0 = -sum(q_i) + q_loss.

The linear model evaluates

    |v| = A_v [p; q] + b_v,   |i| = A_i [p; q] + b_i,   [p_l; q_l] = A_l [p; q] + b_l

with the matrices taken as exact partial derivatives at a converged
operating point (one LU factorization of the power-flow Jacobian, one
triangular solve per injection variable).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from feederdispatch.errors import (
    DataError,
    DegenerateOperatingPoint,
    PowerFlowDivergence,
    TopologyError,
)

logger = logging.getLogger(__name__)

SLACK = 'slack'
PQ = 'PQ'
BUS_TYPES = (SLACK, PQ)

DEFAULT_PF_TOLERANCE = 1e-11
DEFAULT_PF_MAX_ITER = 50

# per-unit quantity -> how to obtain its base from the network, in user units
_QUANTITIES = ('power', 'voltage', 'impedance', 'current')


@dataclass(frozen=True)
class Bus:
    id: str
    type: str = PQ


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r_ohm: float
    x_ohm: float
    ampacity_a: float

    @property
    def label(self):
        return "{0}-{1}".format(self.from_bus, self.to_bus)


@dataclass(frozen=True)
class NetworkModel:
    """Buses, lines and base quantities of a feeder.

    Power is handled in kW/kVAr at the user level, voltages in V, line
    impedances in ohm and currents in A; ``to_pu``/``from_pu`` convert.
    """

    buses: tuple
    lines: tuple
    v_base_v: float
    s_base_va: float
    slack_v_pu: float = 1.0
    name: str = 'feeder'

    def __post_init__(self):
        object.__setattr__(self, 'buses', tuple(self.buses))
        object.__setattr__(self, 'lines', tuple(self.lines))
        for key in ('v_base_v', 's_base_va', 'slack_v_pu'):
            value = getattr(self, key)
            if not (np.isfinite(value) and value > 0):
                raise DataError("base.{0} must be positive, got {1!r}".format(key, value))

        index = {}
        slack = []
        for position, bus in enumerate(self.buses):
            if bus.id in index:
                raise DataError("buses[{0}].id duplicates bus {1}".format(position, bus.id))
            if bus.type not in BUS_TYPES:
                raise DataError(
                    "buses[{0}].type must be one of {1}, got {2!r}".format(position, '|'.join(BUS_TYPES), bus.type)
                )
            if bus.type == SLACK:
                slack.append(position)
            index[bus.id] = position
        if len(slack) != 1:
            raise DataError("network must have exactly one slack bus, found {0}".format(len(slack)))

        for position, line in enumerate(self.lines):
            for end in ('from_bus', 'to_bus'):
                if getattr(line, end) not in index:
                    raise DataError(
                        "lines[{0}].{1} references unknown bus {2}".format(
                            position, end.replace('_bus', ''), getattr(line, end)
                        )
                    )
            if line.from_bus == line.to_bus:
                raise DataError("lines[{0}] connects bus {1} to itself".format(position, line.from_bus))
            if not (np.isfinite(line.r_ohm) and line.r_ohm > 0):
                raise DataError("lines[{0}].r_ohm must be positive, got {1!r}".format(position, line.r_ohm))
            if not np.isfinite(line.x_ohm):
                raise DataError("lines[{0}].x_ohm must be finite".format(position))
            if not (np.isfinite(line.ampacity_a) and line.ampacity_a > 0):
                raise DataError(
                    "lines[{0}].ampacity_a must be positive, got {1!r}".format(position, line.ampacity_a)
                )

        pq = np.array([i for i in range(len(self.buses)) if i != slack[0]], dtype=int)
        object.__setattr__(self, '_index', index)
        object.__setattr__(self, '_slack', slack[0])
        object.__setattr__(self, '_pq', pq)
        object.__setattr__(self, '_pq_position', {self.buses[i].id: k for k, i in enumerate(pq)})

    @property
    def n_buses(self):
        return len(self.buses)

    @property
    def n_pq(self):
        return len(self.buses) - 1

    @property
    def n_lines(self):
        return len(self.lines)

    @property
    def bus_ids(self):
        return tuple(bus.id for bus in self.buses)

    @property
    def pq_ids(self):
        return tuple(self.buses[i].id for i in self._pq)

    @property
    def line_labels(self):
        return tuple(line.label for line in self.lines)

    @property
    def slack_index(self):
        return self._slack

    @property
    def pq_indices(self):
        return self._pq.copy()

    def bus_index(self, bus_id):
        try:
            return self._index[bus_id]
        except KeyError:
            raise DataError("Unknown bus {0}".format(bus_id))

    def pq_position(self, bus_id):
        """Position of a non-slack bus in injection vectors and A_v rows."""
        try:
            return self._pq_position[bus_id]
        except KeyError:
            raise DataError("Bus {0} is not a non-slack bus of {1}".format(bus_id, self.name))

    @property
    def z_base_ohm(self):
        return self.v_base_v ** 2 / self.s_base_va

    @property
    def i_base_a(self):
        return self.s_base_va / (math.sqrt(3.0) * self.v_base_v)

    @property
    def kw_per_pu(self):
        return self.s_base_va / 1000.0

    def _base(self, quantity):
        if quantity == 'power':
            return self.kw_per_pu
        if quantity == 'voltage':
            return self.v_base_v
        if quantity == 'impedance':
            return self.z_base_ohm
        if quantity == 'current':
            return self.i_base_a
        raise DataError("Unknown per-unit quantity {0!r}; expected one of {1}".format(quantity, _QUANTITIES))

    def to_pu(self, value, quantity='power'):
        """kW/kVAr, V, ohm or A to per unit."""
        return np.asarray(value) / self._base(quantity)

    def from_pu(self, value, quantity='power'):
        """Per unit back to kW/kVAr, V, ohm or A."""
        return np.asarray(value) * self._base(quantity)

    def line_impedances_pu(self):
        return np.array(
            [complex(line.r_ohm, line.x_ohm) for line in self.lines], dtype=complex
        ) / self.z_base_ohm

    def ampacity_pu(self):
        return np.array([line.ampacity_a for line in self.lines], dtype=float) / self.i_base_a

    def line_ends(self):
        """Bus positions of every line's from and to ends."""
        f = np.array([self._index[line.from_bus] for line in self.lines], dtype=int)
        t = np.array([self._index[line.to_bus] for line in self.lines], dtype=int)
        return f, t

    def injection_map(self, buses):
        """Matrix M (len(buses), n_pq) so that per-bus values @ M are in injection order."""
        mapping = np.zeros((len(buses), self.n_pq))
        for k, bus in enumerate(buses):
            mapping[k, self.pq_position(bus)] = 1.0
        return mapping

    def injection_kw(self, buses, p_kw, q_kvar):
        """InjectionVector (per unit) from per-bus kW/kVAr values."""
        mapping = self.injection_map(buses)
        return InjectionVector.from_kw(self, np.asarray(p_kw, dtype=float) @ mapping,
                                       np.asarray(q_kvar, dtype=float) @ mapping)


@dataclass(frozen=True)
class InjectionVector:
    """Per-unit nodal injections of the non-slack buses (positive into the feeder)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1)
        q = np.array(self.q, dtype=float).reshape(-1)
        if p.shape != q.shape:
            raise DataError("Injection p and q lengths differ: {0} vs {1}".format(p.size, q.size))
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise DataError("Injections must be finite")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, 'p', p)
        object.__setattr__(self, 'q', q)

    def __len__(self):
        return self.p.size

    def stacked(self):
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_stacked(cls, values):
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size % 2:
            raise DataError("Stacked injection vector must have even length, got {0}".format(values.size))
        half = values.size // 2
        return cls(values[:half], values[half:])

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))

    @classmethod
    def from_kw(cls, network, p_kw, q_kvar):
        return cls(network.to_pu(p_kw), network.to_pu(q_kvar))


@dataclass(frozen=True)
class PowerFlowSolution:
    """Exact AC operating point. Voltages and currents are per unit, all buses included."""

    v_mag: np.ndarray
    v_ang: np.ndarray
    i_mag: np.ndarray
    s0: complex
    p_loss: float
    q_loss: float
    converged: bool
    iterations: int
    mismatch: float
    injection: InjectionVector
    pq_indices: np.ndarray = field(repr=False, default=None)
    line_currents: np.ndarray = field(repr=False, default=None)

    @property
    def p0(self):
        return float(self.s0.real)

    @property
    def q0(self):
        return float(self.s0.imag)

    @property
    def voltage(self):
        return self.v_mag * np.exp(1j * self.v_ang)

    @property
    def pq_v_mag(self):
        """Voltage magnitudes of the non-slack buses, in injection order."""
        return self.v_mag[self.pq_indices]


@dataclass(frozen=True)
class LinearGridModel:
    """Sensitivity-coefficient model around one operating point (per unit)."""

    a_v: np.ndarray
    b_v: np.ndarray
    a_i: np.ndarray
    b_i: np.ndarray
    a_l: np.ndarray
    b_l: np.ndarray
    injection: InjectionVector
    t: int = 0

    def __post_init__(self):
        n = len(self.injection)
        n_lines = np.shape(self.b_i)[0] if np.ndim(self.b_i) == 1 else -1
        expected = {
            'a_v': (n, 2 * n),
            'b_v': (n,),
            'a_i': (n_lines, 2 * n),
            'b_i': (n_lines,),
            'a_l': (2, 2 * n),
            'b_l': (2,),
        }
        for key, shape in expected.items():
            value = np.asarray(getattr(self, key), dtype=float)
            if value.shape != shape:
                raise DataError("LinearGridModel.{0} has shape {1}, expected {2}".format(key, value.shape, shape))
            value = value.copy()
            value.setflags(write=False)
            object.__setattr__(self, key, value)

    @property
    def n_pq(self):
        return len(self.injection)

    @property
    def n_lines(self):
        return self.b_i.size

    def columns(self, position):
        """Columns of the p and q injection of one non-slack bus."""
        return position, self.n_pq + position


@dataclass(frozen=True)
class StatePrediction:
    v: np.ndarray
    i: np.ndarray
    p_loss: float
    q_loss: float


@dataclass(frozen=True)
class GridLimits:
    """Voltage band (pu) and line ampacities (pu)."""

    v_min: float
    v_max: float
    i_max: np.ndarray

    def __post_init__(self):
        i_max = np.array(self.i_max, dtype=float).reshape(-1)
        if not (0 < self.v_min < self.v_max):
            raise DataError("limits require 0 < v_min < v_max, got {0} and {1}".format(self.v_min, self.v_max))
        if np.any(~np.isfinite(i_max)) or np.any(i_max <= 0):
            raise DataError("limits.i_max must be strictly positive")
        i_max.setflags(write=False)
        object.__setattr__(self, 'i_max', i_max)

    @classmethod
    def from_network(cls, network, v_min=0.95, v_max=1.05):
        return cls(v_min=float(v_min), v_max=float(v_max), i_max=network.ampacity_pu())


@dataclass(frozen=True)
class Violation:
    kind: str
    element: str
    value: float
    limit: float

    @property
    def magnitude(self):
        return abs(self.value - self.limit)


@dataclass(frozen=True)
class ConstraintReport:
    mode: str
    v: np.ndarray
    i: np.ndarray
    v_margin_low: np.ndarray
    v_margin_high: np.ndarray
    i_margin: np.ndarray
    violations: tuple
    step: int = None

    @property
    def violated(self):
        return bool(self.violations)

    @property
    def min_voltage_margin(self):
        if self.v.size == 0:
            return float('inf')
        return float(min(self.v_margin_low.min(), self.v_margin_high.min()))

    @property
    def min_current_margin(self):
        if self.i.size == 0:
            return float('inf')
        return float(self.i_margin.min())


def build_admittance(network):
    """Dense nodal admittance matrix (per unit) from per-line stamps."""
    if not network.lines:
        raise TopologyError("network {0} is disconnected: it has no lines".format(network.name))

    n_b = network.n_buses
    f, t = network.line_ends()
    adjacency = coo_matrix((np.ones(f.size), (f, t)), shape=(n_b, n_b))
    n_components, labels = connected_components(adjacency, directed=False)
    if n_components > 1:
        slack_label = labels[network.slack_index]
        unreachable = [network.buses[i].id for i in range(n_b) if labels[i] != slack_label]
        raise TopologyError(
            "network {0} is disconnected: buses {1} are unreachable from the slack".format(
                network.name, ', '.join(unreachable)
            )
        )

    y = 1.0 / network.line_impedances_pu()
    ybus = np.zeros((n_b, n_b), dtype=complex)
    np.add.at(ybus, (f, f), y)
    np.add.at(ybus, (t, t), y)
    np.add.at(ybus, (f, t), -y)
    np.add.at(ybus, (t, f), -y)
    return ybus


def _power_derivatives(ybus, v):
    """dS/d|V| and dS/dθ of the complex bus injections, all buses."""
    ibus = ybus @ v
    v_norm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(ybus * v_norm[None, :]) + np.diag(np.conj(ibus) * v_norm)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - ybus * v[None, :])
    return ds_dvm, ds_dva


def _jacobian(ybus, v, pq):
    ds_dvm, ds_dva = _power_derivatives(ybus, v)
    block = np.ix_(pq, pq)
    return np.block([
        [ds_dva[block].real, ds_dvm[block].real],
        [ds_dva[block].imag, ds_dvm[block].imag],
    ])


def solve_power_flow(network, inj, tol=DEFAULT_PF_TOLERANCE, max_iter=DEFAULT_PF_MAX_ITER, ybus=None):
    """Newton-Raphson power flow in polar form from a flat start.

    Args:
        network: NetworkModel.
        inj: InjectionVector in per unit, one entry per non-slack bus.
        tol: Infinity-norm tolerance of the power mismatch (pu).
        max_iter: Newton iterations before giving up.
        ybus: Optional precomputed admittance matrix.

    Returns:
        PowerFlowSolution

    Raises:
        PowerFlowDivergence: mismatch still above ``tol`` after ``max_iter``.
    """
    if len(inj) != network.n_pq:
        raise DataError("Injection vector has {0} entries, network has {1} non-slack buses".format(
            len(inj), network.n_pq))
    if ybus is None:
        ybus = build_admittance(network)

    n = network.n_pq
    pq = network.pq_indices
    s_spec = np.zeros(network.n_buses, dtype=complex)
    s_spec[pq] = inj.p + 1j * inj.q

    v_mag = np.full(network.n_buses, network.slack_v_pu, dtype=float)
    v_ang = np.zeros(network.n_buses, dtype=float)
    v = v_mag * np.exp(1j * v_ang)

    mismatch = float('inf')
    iterations = 0
    while True:
        s_calc = v * np.conj(ybus @ v)
        delta = s_calc - s_spec
        f = np.concatenate([delta[pq].real, delta[pq].imag])
        mismatch = float(np.max(np.abs(f))) if n else 0.0
        if not np.isfinite(mismatch):
            break
        if mismatch < tol or iterations >= max_iter:
            break
        try:
            dx = np.linalg.solve(_jacobian(ybus, v, pq), -f)
        except np.linalg.LinAlgError:
            break
        v_ang[pq] += dx[:n]
        v_mag[pq] += dx[n:]
        if np.any(v_mag <= 0):
            break
        v = v_mag * np.exp(1j * v_ang)
        iterations += 1

    if not (mismatch < tol):
        raise PowerFlowDivergence(
            "power flow did not converge after {0} iterations (mismatch {1:.3e} pu)".format(iterations, mismatch),
            mismatch=mismatch,
            iterations=iterations,
        )

    f_idx, t_idx = network.line_ends()
    z = network.line_impedances_pu()
    currents = (v[f_idx] - v[t_idx]) / z
    losses = np.sum(z * np.abs(currents) ** 2)
    s0 = complex(v[network.slack_index] * np.conj((ybus @ v)[network.slack_index]))
    logger.debug("power flow converged iterations=%d mismatch=%.2e", iterations, mismatch)
    return PowerFlowSolution(
        v_mag=v_mag.copy(),
        v_ang=v_ang.copy(),
        i_mag=np.abs(currents),
        s0=s0,
        p_loss=float(losses.real),
        q_loss=float(losses.imag),
        converged=True,
        iterations=iterations,
        mismatch=mismatch,
        injection=inj,
        pq_indices=pq,
        line_currents=currents,
    )


def compute_sensitivities(network, state, t=0, ybus=None):
    """Sensitivity coefficients of |v|, |i| and losses at a converged state.

    Raises:
        DegenerateOperatingPoint: the power-flow Jacobian is singular.
    """
    if not state.converged:
        raise DataError("sensitivities need a converged power-flow state")
    if ybus is None:
        ybus = build_admittance(network)

    n = network.n_pq
    pq = network.pq_indices
    v = state.voltage
    jac = _jacobian(ybus, v, pq)
    lu, piv = scipy.linalg.lu_factor(jac, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() <= 1e-12 * max(1.0, pivots.max()):
        raise DegenerateOperatingPoint("degenerate operating point: singular power-flow Jacobian at t={0}".format(t))
    # columns: injections [p; q], rows: [θ; |v|] of the non-slack buses
    dx = scipy.linalg.lu_solve((lu, piv), np.eye(2 * n))
    d_ang = dx[:n]
    d_mag = dx[n:]

    dv = np.zeros((network.n_buses, 2 * n), dtype=complex)
    dv[pq] = v[pq][:, None] * (1j * d_ang + d_mag / state.v_mag[pq][:, None])

    f_idx, t_idx = network.line_ends()
    z = network.line_impedances_pu()
    currents = state.line_currents
    di = (dv[f_idx] - dv[t_idx]) / z[:, None]
    d_sq = 2.0 * np.real(np.conj(currents)[:, None] * di)

    a_i = np.zeros((network.n_lines, 2 * n))
    flowing = state.i_mag > 1e-14
    a_i[flowing] = 0.5 * d_sq[flowing] / state.i_mag[flowing, None]
    a_l = np.vstack([z.real @ d_sq, z.imag @ d_sq])

    inj0 = state.injection.stacked()
    v0 = state.v_mag[pq]
    return LinearGridModel(
        a_v=d_mag,
        b_v=v0 - d_mag @ inj0,
        a_i=a_i,
        b_i=state.i_mag - a_i @ inj0,
        a_l=a_l,
        b_l=np.array([state.p_loss, state.q_loss]) - a_l @ inj0,
        injection=state.injection,
        t=t,
    )


def predict_state(lin, inj):
    """Affine evaluation of the linear grid model."""
    values = inj.stacked() if isinstance(inj, InjectionVector) else np.asarray(inj, dtype=float).reshape(-1)
    if values.size != 2 * lin.n_pq:
        raise DataError("Injection vector has {0} entries, linear model expects {1}".format(
            values.size, 2 * lin.n_pq))
    losses = lin.a_l @ values + lin.b_l
    return StatePrediction(
        v=lin.a_v @ values + lin.b_v,
        i=lin.a_i @ values + lin.b_i,
        p_loss=float(losses[0]),
        q_loss=float(losses[1]),
    )


def constraint_report(v, i, limits, mode='ac', step=None, bus_labels=None, line_labels=None, tolerance=0.0):
    """Margins and violations for given voltage and current magnitudes."""
    v = np.asarray(v, dtype=float)
    i = np.asarray(i, dtype=float)
    if i.size != limits.i_max.size:
        raise DataError("Current vector has {0} entries, limits cover {1} lines".format(i.size, limits.i_max.size))
    bus_labels = bus_labels or [str(k) for k in range(v.size)]
    line_labels = line_labels or [str(k) for k in range(i.size)]

    low = v - limits.v_min
    high = limits.v_max - v
    i_margin = limits.i_max - i
    violations = []
    for k in range(v.size):
        if low[k] < -tolerance:
            violations.append(Violation('v_min', bus_labels[k], float(v[k]), limits.v_min))
        if high[k] < -tolerance:
            violations.append(Violation('v_max', bus_labels[k], float(v[k]), limits.v_max))
    for k in range(i.size):
        if i_margin[k] < -tolerance:
            violations.append(Violation('ampacity', line_labels[k], float(i[k]), float(limits.i_max[k])))
    return ConstraintReport(
        mode=mode,
        v=v,
        i=i,
        v_margin_low=low,
        v_margin_high=high,
        i_margin=i_margin,
        violations=tuple(violations),
        step=step,
    )


def audit_constraints(model, inj, limits, step=None, labels=None, tolerance=0.0):
    """Check voltage and ampacity limits, linearized or exact.

    Args:
        model: LinearGridModel (linear evaluation) or NetworkModel (exact AC).
        inj: InjectionVector in per unit.
        limits: GridLimits.
        step: Optional step index recorded on the report.
        labels: Optional (bus ids, line labels) for linear mode.

    Returns:
        ConstraintReport
    """
    if isinstance(model, LinearGridModel):
        prediction = predict_state(model, inj)
        bus_labels, line_labels = labels if labels else (None, None)
        return constraint_report(
            prediction.v, prediction.i, limits, mode='linear', step=step,
            bus_labels=bus_labels, line_labels=line_labels, tolerance=tolerance,
        )
    if isinstance(model, NetworkModel):
        state = solve_power_flow(model, inj)
        return constraint_report(
            state.pq_v_mag, state.i_mag, limits, mode='ac', step=step,
            bus_labels=list(model.pq_ids), line_labels=list(model.line_labels), tolerance=tolerance,
        )
    raise DataError("audit_constraints needs a LinearGridModel or a NetworkModel, got {0}".format(
        type(model).__name__))
