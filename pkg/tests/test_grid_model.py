#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Test suite for grid_model.py"""

import math

import numpy as np
import pytest

from feederdispatch.errors import DataError, PowerFlowDivergence, TopologyError
from feederdispatch.grid_model import (
    Bus,
    GridLimits,
    InjectionVector,
    Line,
    NetworkModel,
    audit_constraints,
    build_admittance,
    compute_sensitivities,
    predict_state,
    solve_power_flow,
)

LOADED = InjectionVector(np.array([-0.06, 0.02, 0.04]), np.array([-0.018, 0.005, 0.0]))


def _fixed_point_voltages(network, inj, iterations=300):
    """Reference solution by Z-bus fixed-point iteration."""
    ybus = build_admittance(network)
    pq = network.pq_indices
    slack = network.slack_index
    s = inj.p + 1j * inj.q
    y_pp = ybus[np.ix_(pq, pq)]
    y_ps = ybus[pq, slack]
    v = np.ones(pq.size, dtype=complex)
    for _ in range(iterations):
        v = np.linalg.solve(y_pp, np.conj(s / v) - y_ps * network.slack_v_pu)
    return v


class TestNetworkModel:
    """Test validation and unit conversion of NetworkModel"""

    def test_per_unit_bases(self, toy_network):
        """Power base in kW and current base from the three-phase relation"""
        assert toy_network.kw_per_pu == 100.0
        assert float(toy_network.to_pu(50.0)) == 0.5
        assert float(toy_network.from_pu(0.25)) == 25.0
        assert toy_network.i_base_a == pytest.approx(100000.0 / (math.sqrt(3.0) * 400.0))
        assert toy_network.ampacity_pu()[0] == pytest.approx(200.0 / toy_network.i_base_a)

    def test_injection_order_excludes_slack(self, toy_network):
        """Non-slack buses keep their file order"""
        assert list(toy_network.pq_ids) == ['N1', 'N2', 'N3']
        assert toy_network.pq_position('N3') == 2
        with pytest.raises(DataError):
            toy_network.pq_position('N0')

    def test_injection_map(self, toy_network):
        """Per-bus values land in injection order"""
        mapping = toy_network.injection_map(['N3', 'N1'])

        assert np.array_equal(np.array([1.0, 2.0]) @ mapping, [2.0, 0.0, 1.0])

    def test_rejects_non_positive_resistance(self):
        """Lines need a strictly positive resistance"""
        with pytest.raises(DataError, match=r'lines\[0\]\.r_ohm must be positive'):
            NetworkModel([Bus('A', 'slack'), Bus('B')], [Line('A', 'B', 0.0, 0.01, 100.0)], 400.0, 1e5)

    def test_rejects_two_slack_buses(self):
        """Exactly one slack bus is required"""
        with pytest.raises(DataError, match='exactly one slack'):
            NetworkModel([Bus('A', 'slack'), Bus('B', 'slack')], [Line('A', 'B', 0.1, 0.01, 100.0)], 400.0, 1e5)

    def test_rejects_unknown_line_end(self):
        """Lines may only reference declared buses"""
        with pytest.raises(DataError, match='unknown bus C'):
            NetworkModel([Bus('A', 'slack'), Bus('B')], [Line('A', 'C', 0.1, 0.01, 100.0)], 400.0, 1e5)

    def test_no_lines_is_a_topology_error(self):
        """A network without lines cannot be solved"""
        network = NetworkModel([Bus('A', 'slack'), Bus('B')], [], 400.0, 1e5)

        with pytest.raises(TopologyError):
            build_admittance(network)

    def test_disconnected_bus_is_reported(self):
        """Buses unreachable from the slack are named in the error"""
        network = NetworkModel(
            [Bus('A', 'slack'), Bus('B'), Bus('C')], [Line('A', 'B', 0.1, 0.01, 100.0)], 400.0, 1e5)

        with pytest.raises(TopologyError, match='C'):
            solve_power_flow(network, InjectionVector.zeros(2))


class TestPowerFlow:
    """Test the Newton-Raphson power flow"""

    def test_flat_profile_without_injections(self, toy_network):
        """No injections give unit voltages and no losses"""
        state = solve_power_flow(toy_network, InjectionVector.zeros(3))

        assert np.allclose(state.v_mag, 1.0)
        assert state.p_loss == pytest.approx(0.0, abs=1e-15)
        assert abs(state.s0) < 1e-12

    def test_matches_fixed_point_reference(self, toy_network):
        """Complex voltages agree with an independent fixed-point solution"""
        state = solve_power_flow(toy_network, LOADED)
        reference = _fixed_point_voltages(toy_network, LOADED)

        assert np.allclose(state.voltage[toy_network.pq_indices], reference, atol=1e-9)

    def test_slack_power_balances_injections_and_losses(self, toy_network):
        """p0 = -sum(p) + p_loss and q0 = -sum(q) + q_loss"""
        state = solve_power_flow(toy_network, LOADED)

        assert state.p0 == pytest.approx(-LOADED.p.sum() + state.p_loss, abs=1e-9)
        assert state.q0 == pytest.approx(-LOADED.q.sum() + state.q_loss, abs=1e-9)
        assert state.p_loss > 0

    def test_net_load_lowers_voltage(self, toy_network):
        """Consumption at N1 pulls its voltage below the slack"""
        state = solve_power_flow(toy_network, LOADED)

        assert state.pq_v_mag[0] < 1.0

    def test_divergence_raises(self, toy_network):
        """An impossible load raises PowerFlowDivergence with diagnostics"""
        inj = InjectionVector(np.array([0.0, -50.0, 0.0]), np.zeros(3))

        with pytest.raises(PowerFlowDivergence) as excinfo:
            solve_power_flow(toy_network, inj)

        assert excinfo.value.iterations is not None

    def test_injection_length_checked(self, toy_network):
        """Injection vectors must cover every non-slack bus"""
        with pytest.raises(DataError):
            solve_power_flow(toy_network, InjectionVector.zeros(2))


class TestSensitivities:
    """Test the sensitivity-coefficient linearization"""

    def _finite_difference(self, network, h=1e-5):
        base = LOADED.stacked()
        columns = {'v': [], 'i': [], 'loss': []}
        for j in range(base.size):
            step = np.zeros(base.size)
            step[j] = h
            up = solve_power_flow(network, InjectionVector.from_stacked(base + step))
            down = solve_power_flow(network, InjectionVector.from_stacked(base - step))
            columns['v'].append((up.pq_v_mag - down.pq_v_mag) / (2 * h))
            columns['i'].append((up.i_mag - down.i_mag) / (2 * h))
            columns['loss'].append([(up.p_loss - down.p_loss) / (2 * h), (up.q_loss - down.q_loss) / (2 * h)])
        return {key: np.array(value).T for key, value in columns.items()}

    def test_coefficients_match_finite_differences(self, toy_network):
        """A_v, A_i and A_l are the partial derivatives at the operating point"""
        lin = compute_sensitivities(toy_network, solve_power_flow(toy_network, LOADED))
        reference = self._finite_difference(toy_network)

        assert np.allclose(lin.a_v, reference['v'], atol=1e-5)
        assert np.allclose(lin.a_i, reference['i'], atol=1e-5)
        assert np.allclose(lin.a_l, reference['loss'], atol=1e-5)

    def test_prediction_exact_at_operating_point(self, toy_network):
        """The affine model reproduces the AC state it was built from"""
        state = solve_power_flow(toy_network, LOADED)
        prediction = predict_state(compute_sensitivities(toy_network, state), LOADED)

        assert np.allclose(prediction.v, state.pq_v_mag, atol=1e-12)
        assert np.allclose(prediction.i, state.i_mag, atol=1e-12)
        assert prediction.p_loss == pytest.approx(state.p_loss, abs=1e-12)

    def test_prediction_error_is_second_order(self, toy_network):
        """A small move keeps the linear prediction close to the AC solution"""
        lin = compute_sensitivities(toy_network, solve_power_flow(toy_network, LOADED))
        moved = InjectionVector(LOADED.p + np.array([0.0, -0.001, 0.001]), LOADED.q)
        prediction = predict_state(lin, moved)
        exact = solve_power_flow(toy_network, moved)

        assert np.max(np.abs(prediction.v - exact.pq_v_mag)) < 1e-5

    def test_predict_state_checks_length(self, toy_network):
        """The stacked injection must match the model"""
        lin = compute_sensitivities(toy_network, solve_power_flow(toy_network, LOADED))

        with pytest.raises(DataError):
            predict_state(lin, np.zeros(4))


class TestAuditConstraints:
    """Test constraint checks in linear and AC mode"""

    def test_within_limits(self, toy_network):
        """Light loading stays inside the default band"""
        report = audit_constraints(toy_network, LOADED, GridLimits.from_network(toy_network))

        assert report.mode == 'ac'
        assert not report.violated
        assert report.min_voltage_margin > 0

    def test_voltage_violation_reported_in_both_modes(self, toy_network):
        """A lower limit just under the slack voltage is violated at N1"""
        limits = GridLimits(v_min=0.9999, v_max=1.05, i_max=toy_network.ampacity_pu())
        lin = compute_sensitivities(toy_network, solve_power_flow(toy_network, LOADED))

        ac = audit_constraints(toy_network, LOADED, limits)
        linear = audit_constraints(lin, LOADED, limits, labels=(list(toy_network.pq_ids), None))

        assert linear.mode == 'linear'
        for report in (ac, linear):
            kinds = {(v.kind, v.element) for v in report.violations}
            assert ('v_min', 'N1') in kinds

    def test_ampacity_violation_names_line(self, toy_network):
        """Every loaded line exceeds a tiny ampacity"""
        limits = GridLimits(v_min=0.9, v_max=1.1, i_max=np.full(3, 1e-4))

        report = audit_constraints(toy_network, LOADED, limits, step=7)

        assert report.step == 7
        assert sorted(v.element for v in report.violations) == ['N0-N1', 'N1-N2', 'N1-N3']
        assert all(v.magnitude > 0 for v in report.violations)

    def test_invalid_limits(self, toy_network):
        """The voltage band must be ordered"""
        with pytest.raises(DataError):
            GridLimits(v_min=1.05, v_max=0.95, i_max=toy_network.ampacity_pu())


def _benchmark_base(network, resources):
    """Loads at nominal, PV at half rating, batteries idle (kW, kVAr per PQ bus)."""
    p = np.zeros(len(network.pq_ids))
    q = np.zeros(len(network.pq_ids))
    for load in resources.loads:
        k = network.pq_position(load.bus)
        p[k] -= load.nominal_kva * load.power_factor
        q[k] -= load.nominal_kva * math.sqrt(1.0 - load.power_factor ** 2)
    for plant in resources.pv_plants:
        p[network.pq_position(plant.bus)] += 0.5 * plant.rating_kva
    return p, q


def _move_resources(rng, network, resources, base_p, base_q, scale):
    """Operating point inside every capability set, ``scale`` of the way from the base to a random point."""
    p = base_p.copy()
    q = base_q.copy()
    for battery in resources.batteries:
        k = network.pq_position(battery.bus)
        radius = battery.rating_kva * math.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * math.pi)
        p[k] += scale * radius * math.cos(angle)
        q[k] += scale * radius * math.sin(angle)
    for plant in resources.pv_plants:
        k = network.pq_position(plant.bus)
        output = plant.rating_kva * rng.uniform()
        p[k] += scale * (output - 0.5 * plant.rating_kva)
        if plant.reactive_capable:
            q[k] += scale * rng.uniform(-1.0, 1.0) * math.sqrt(plant.rating_kva ** 2 - output ** 2)
    return InjectionVector.from_kw(network, p, q)


@pytest.mark.slow
class TestLinearizationSweep:
    """Test the affine model against the AC power flow on the benchmark feeder"""

    def _model(self, network, resources):
        ybus = build_admittance(network)
        base_p, base_q = _benchmark_base(network, resources)
        state = solve_power_flow(network, InjectionVector.from_kw(network, base_p, base_q), ybus=ybus)
        return ybus, base_p, base_q, compute_sensitivities(network, state, ybus=ybus)

    def test_voltages_over_resource_ranges(self, benchmark_network, benchmark_resources):
        """Any setpoint within the ratings keeps the voltage prediction within 1e-3 pu"""
        ybus, base_p, base_q, lin = self._model(benchmark_network, benchmark_resources)
        rng = np.random.default_rng(11)

        worst = 0.0
        for _ in range(1000):
            inj = _move_resources(rng, benchmark_network, benchmark_resources, base_p, base_q, 1.0)
            exact = solve_power_flow(benchmark_network, inj, ybus=ybus)
            worst = max(worst, float(np.max(np.abs(predict_state(lin, inj).v - exact.pq_v_mag))))

        assert worst <= 1e-3

    def test_losses_over_step_sized_moves(self, benchmark_network, benchmark_resources):
        """Moves of one control step keep the loss prediction within 2% of the AC losses"""
        ybus, base_p, base_q, lin = self._model(benchmark_network, benchmark_resources)
        rng = np.random.default_rng(12)

        for _ in range(200):
            inj = _move_resources(rng, benchmark_network, benchmark_resources, base_p, base_q, 0.05)
            exact = solve_power_flow(benchmark_network, inj, ybus=ybus)
            predicted = predict_state(lin, inj)

            assert abs(predicted.p_loss - exact.p_loss) <= 0.02 * exact.p_loss
            assert np.max(np.abs(predicted.v - exact.pq_v_mag)) <= 1e-5

    def test_loss_error_grows_quadratically(self, benchmark_network, benchmark_resources):
        """Doubling the move roughly quadruples the loss prediction error"""
        ybus, base_p, base_q, lin = self._model(benchmark_network, benchmark_resources)
        errors = []
        for scale in (0.1, 0.2):
            inj = _move_resources(np.random.default_rng(13), benchmark_network, benchmark_resources,
                                  base_p, base_q, scale)
            exact = solve_power_flow(benchmark_network, inj, ybus=ybus)
            errors.append(abs(predict_state(lin, inj).p_loss - exact.p_loss))

        assert errors[1] / errors[0] == pytest.approx(4.0, rel=0.2)
