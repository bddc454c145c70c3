#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Plot-data series and text summary tables for schedules, runs and sweeps.

Series are written as TSV files (one x column, one or more y columns) so any
plotting tool can render them; nothing here draws.
"""

import logging
import os

import numpy as np
import pandas as pd

from feederdispatch.datafiles import write_tsv
from feederdispatch.forecasting import net_demand

logger = logging.getLogger(__name__)

PLOTS_DIR = 'plots'


def _scenario_columns(values, prefix):
    return {'{0}{1}'.format(prefix, w): values[w] for w in range(values.shape[0])}


def dayahead_series(solution, scenarios):
    """Frames of the day-ahead figures keyed by file stem.

    Net demand and GCP power per scenario with the plan, then per battery the
    power and SOC per scenario.
    """
    steps = np.arange(len(solution.plan))
    plan = solution.plan.p_disp_kw
    series = {
        'net_demand_scenarios': pd.DataFrame(dict(
            {'step': steps}, **_scenario_columns(net_demand(scenarios), 'scenario_'), plan_kw=plan)),
        'gcp_scenarios': pd.DataFrame(dict(
            {'step': steps}, **_scenario_columns(solution.p0, 'scenario_'), plan_kw=plan)),
    }
    for name, data in solution.batteries.items():
        frame = {'step': steps}
        frame.update(_scenario_columns(data['p'], 'p_kw_'))
        frame.update(_scenario_columns(data['soe'], 'soe_kwh_'))
        series['battery_{0}_scenarios'.format(name)] = pd.DataFrame(frame)
    return series


def closed_loop_series(trace):
    """Frames of the real-time figures: GCP tracking, batteries and PV plants."""
    frame = trace.frame
    steps = frame['step'].to_numpy()
    series = {
        'gcp_tracking': pd.DataFrame({
            'step': steps,
            'plan_kw': frame['p_disp_kw'],
            'realized_kw': frame['p_gcp_kw'],
            'uncontrolled_kw': frame['p_gcp_unc_kw'],
        }),
    }
    for name in trace.battery_names:
        series['battery_{0}'.format(name)] = pd.DataFrame({
            'step': steps,
            'p_kw': frame['p_kw_' + name],
            'soc': frame['soc_' + name],
        })
    for name in trace.plant_names:
        series['pv_{0}'.format(name)] = pd.DataFrame({
            'step': steps,
            'potential_kw': frame['potential_kw_' + name],
            'realized_kw': frame['p_kw_' + name],
        })
    return series


def write_series(series, directory):
    """Write every frame as <directory>/plots/<stem>.tsv; returns the paths."""
    target = os.path.join(directory, PLOTS_DIR)
    paths = [write_tsv(frame, os.path.join(target, stem + '.tsv')) for stem, frame in sorted(series.items())]
    logger.info("plot data written files=%d directory=%s", len(paths), target)
    return paths


def format_table(headers, rows, title=None, precision=2):
    """Fixed-width text table with right-aligned numbers."""

    def cell(value):
        if isinstance(value, (float, np.floating)):
            return '{0:.{1}f}'.format(value, precision)
        if value is None:
            return '-'
        return str(value)

    body = [[cell(value) for value in row] for row in rows]
    widths = [max([len(str(h))] + [len(row[k]) for row in body]) for k, h in enumerate(headers)]
    lines = []
    if title:
        lines.append(title)
    lines.append('  '.join(str(h).rjust(w) for h, w in zip(headers, widths)))
    lines.append('  '.join('-' * w for w in widths))
    for row in body:
        lines.append('  '.join(value.rjust(w) for value, w in zip(row, widths)))
    return '\n'.join(lines)


def _unit(metrics):
    return '%' if metrics.mode == 'percent' else 'kW'


def tracking_table(metrics):
    """Tracking errors with and without dispatch."""
    unit = _unit(metrics)
    rows = [
        ('Dispatch', metrics.rmse, metrics.mean, metrics.mae),
        ('No dispatch', metrics.rmse_unc, metrics.mean_unc, metrics.mae_unc),
    ]
    headers = ('', 'RMSE [{0}]'.format(unit), 'Mean [{0}]'.format(unit), 'MAE [{0}]'.format(unit))
    return format_table(headers, rows, title='Tracking error')


def computation_table(metrics):
    rows = [('Iterations', metrics.iterations_mean, metrics.iterations_sd, float(metrics.iterations_max))]
    if metrics.time_mean_s is not None:
        rows.append(('Time [s]', metrics.time_mean_s, metrics.time_sd_s, metrics.time_max_s))
    return format_table(('', 'Mean', 'SD', 'Max'), rows, title='Computation', precision=3)


def mode_table(metrics_by_mode):
    """Tracking errors of several controller modes side by side."""
    rows = []
    for mode, metrics in metrics_by_mode.items():
        rows.append((mode, metrics.rmse, metrics.mean, metrics.mae, metrics.iterations_mean))
    return format_table(('Mode', 'RMSE', 'Mean', 'MAE', 'Iterations'), rows, title='Controller modes')


def bess_table(summary):
    rows = [
        (int(row['count']), row['iterations_mean'], row['step_time_mean_s'], row['step_time_max_s'], row['rmse'])
        for _, row in summary.iterrows()
    ]
    headers = ('Units', 'Iterations', 'Step time mean [s]', 'Step time max [s]', 'RMSE')
    return format_table(headers, rows, title='Distributed batteries', precision=3)


def lambda_table(summary):
    rows = [('{0:g}'.format(row['lambda']), row['mrmse']) for _, row in summary.iterrows()]
    return format_table(('lambda', 'mRMSE'), rows, title='Plan reliability')
