#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Readers and writers for every file the pipeline consumes or produces.

Network and resource descriptions are YAML; day series, plans, traces and
summaries are tab-separated text with ``#`` comments allowed. Float columns
are written with a fixed format so reruns produce identical files.
"""

import glob
import logging
import os
from contextlib import contextmanager

import numpy as np
import pandas as pd
import yaml

from feederdispatch.day_ahead import DispatchPlan
from feederdispatch.errors import DataError
from feederdispatch.forecasting import PV_POTENTIAL_PREFIX, HistoricalDay
from feederdispatch.grid_model import Bus, Line, NetworkModel
from feederdispatch.resources import BATTERY, LOAD, PV, BatteryParams, LoadParams, PvParams, ResourceSet
from feederdispatch.simulator import RealizationData
from feederdispatch.timegrid import STEPS_PER_DAY

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.10g'
PREDICTION_SUFFIX = '.prediction.tsv'
DAY_SUFFIX = '.tsv'


@contextmanager
def file_access(path, action):
    """Report operating-system errors on ``path`` as DataError."""
    try:
        yield
    except OSError as exc:
        raise DataError("cannot {0} {1}: {2}".format(action, path, exc.strerror or exc)) from exc


def ensure_directory(directory):
    if directory:
        with file_access(directory, 'create directory'):
            os.makedirs(directory, exist_ok=True)
    return directory


def _read_yaml(path, label):
    if not path or not os.path.exists(path):
        raise DataError("{0} file not found: {1}".format(label, path))
    with file_access(path, 'read'), open(path, 'r') as handle:
        try:
            data = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise DataError("{0} file {1} is not valid YAML: {2}".format(label, path, exc))
    if not isinstance(data, dict):
        raise DataError("{0} file {1} must contain a mapping".format(label, path))
    return data


def _field(record, section, index, key, cast=float, default=None, required=True):
    value = record.get(key, default)
    if value is None:
        if required:
            raise DataError("{0}[{1}].{2} is required".format(section, index, key))
        return None
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise DataError("{0}[{1}].{2} has invalid value {3!r}".format(section, index, key, value))


def _as_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('true', 'yes', '1'):
        return True
    if text in ('false', 'no', '0'):
        return False
    raise ValueError(value)


def parse_network(data, name='feeder'):
    """Build a NetworkModel from the parsed network mapping."""
    base = data.get('base')
    if not isinstance(base, dict):
        raise DataError("network file needs a 'base' mapping")
    buses = []
    for index, record in enumerate(data.get('buses') or []):
        buses.append(Bus(
            id=_field(record, 'buses', index, 'id', str),
            type=_field(record, 'buses', index, 'type', str, default='PQ'),
        ))
    lines = []
    for index, record in enumerate(data.get('lines') or []):
        lines.append(Line(
            from_bus=_field(record, 'lines', index, 'from', str),
            to_bus=_field(record, 'lines', index, 'to', str),
            r_ohm=_field(record, 'lines', index, 'r_ohm'),
            x_ohm=_field(record, 'lines', index, 'x_ohm'),
            ampacity_a=_field(record, 'lines', index, 'ampacity_a'),
        ))
    for key in ('v_base_v', 's_base_va'):
        if key not in base:
            raise DataError("base.{0} is required".format(key))
    return NetworkModel(
        buses=buses,
        lines=lines,
        v_base_v=float(base['v_base_v']),
        s_base_va=float(base['s_base_va']),
        slack_v_pu=float(base.get('slack_v_pu', 1.0)),
        name=str(data.get('name', name)),
    )


def load_network(path):
    return parse_network(_read_yaml(path, 'network'), name=os.path.splitext(os.path.basename(path))[0])


def parse_resources(data, network=None):
    """Build a ResourceSet from the parsed resource mapping.

    With ``network`` given, every resource bus must be a non-slack bus of it.
    """
    records = data.get('resources')
    if not isinstance(records, list) or not records:
        raise DataError("resource file needs a non-empty 'resources' list")
    batteries, plants, loads = [], [], []
    for index, record in enumerate(records):
        kind = _field(record, 'resources', index, 'type', str)
        name = _field(record, 'resources', index, 'name', str)
        bus = _field(record, 'resources', index, 'bus', str)
        if network is not None:
            try:
                network.pq_position(bus)
            except DataError:
                raise DataError("resources[{0}].bus {1} is not a non-slack bus of the network".format(index, bus))
        if kind == BATTERY:
            batteries.append(BatteryParams(
                name=name,
                bus=bus,
                capacity_kwh=_field(record, 'resources', index, 'capacity_kwh'),
                rating_kva=_field(record, 'resources', index, 'rating_kva'),
                back_off=_field(record, 'resources', index, 'back_off', default=0.1),
                ts_s=_field(record, 'resources', index, 'ts_s', default=30.0),
                efficiency=_field(record, 'resources', index, 'efficiency', default=1.0),
                initial_soc=_field(record, 'resources', index, 'initial_soc', default=0.5),
            ))
        elif kind == PV:
            plants.append(PvParams(
                name=name,
                bus=bus,
                rating_kva=_field(record, 'resources', index, 'rating_kva'),
                reactive_capable=_field(record, 'resources', index, 'reactive_capable', _as_bool, default=False),
            ))
        elif kind == LOAD:
            loads.append(LoadParams(
                name=name,
                bus=bus,
                nominal_kva=_field(record, 'resources', index, 'nominal_kva'),
                power_factor=_field(record, 'resources', index, 'power_factor', default=0.95),
            ))
        else:
            raise DataError("resources[{0}].type must be battery, pv or load, got {1!r}".format(index, kind))
    return ResourceSet(batteries=batteries, pv_plants=plants, loads=loads)


def load_resources(path, network=None):
    return parse_resources(_read_yaml(path, 'resource'), network=network)


def read_tsv(path, label='table'):
    if not path or not os.path.exists(path):
        raise DataError("{0} not found: {1}".format(label, path))
    try:
        with file_access(path, 'read'):
            return pd.read_csv(path, sep='\t', comment='#')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError("{0} {1} is malformed: {2}".format(label, path, exc))


def write_tsv(frame, path):
    ensure_directory(os.path.dirname(path))
    with file_access(path, 'write'):
        frame.to_csv(path, sep='\t', index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return path


def plain(value):
    """Numpy scalars, arrays and tuples as built-in types, recursively."""
    if isinstance(value, dict):
        return {str(key): plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [plain(item) for item in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def write_yaml(data, path):
    ensure_directory(os.path.dirname(path))
    with file_access(path, 'write'), open(path, 'w') as handle:
        yaml.safe_dump(plain(data), handle, sort_keys=False, default_flow_style=False)
    return path


def day_id_from_path(path):
    name = os.path.basename(path)
    if name.endswith(PREDICTION_SUFFIX):
        return name[:-len(PREDICTION_SUFFIX)]
    if name.endswith(DAY_SUFFIX):
        return name[:-len(DAY_SUFFIX)]
    raise DataError("cannot derive a day id from {0}".format(path))


def prediction_path(day_path):
    return os.path.join(os.path.dirname(day_path), day_id_from_path(day_path) + PREDICTION_SUFFIX)


def _check_numeric(frame, path, skip=('timestamp_utc',)):
    for column in frame.columns:
        if column in skip:
            continue
        values = pd.to_numeric(frame[column], errors='coerce')
        if values.isna().any():
            row = int(np.flatnonzero(values.isna().to_numpy())[0])
            raise DataError("{0}: column {1} row {2} is not numeric".format(path, column, row))
        frame[column] = values.astype(float)
    return frame


def load_day(path, expected_steps=STEPS_PER_DAY, with_prediction=True):
    """One day file (and its prediction file when present) as a HistoricalDay."""
    series = _check_numeric(read_tsv(path, 'day file'), path)
    if expected_steps is not None and len(series) != expected_steps:
        raise DataError("{0} has {1} rows, expected {2}".format(path, len(series), expected_steps))
    prediction = None
    pred_path = prediction_path(path)
    if with_prediction and os.path.exists(pred_path):
        prediction = _check_numeric(read_tsv(pred_path, 'prediction file'), pred_path, skip=())
    return HistoricalDay(day_id=day_id_from_path(path), series=series, prediction=prediction)


def load_history(directory, expected_steps=STEPS_PER_DAY):
    """Every <YYYY-MM-DD>.tsv of a history directory, oldest first."""
    if not directory or not os.path.isdir(directory):
        raise DataError("history directory not found: {0}".format(directory))
    paths = sorted(
        path for path in glob.glob(os.path.join(directory, '*' + DAY_SUFFIX))
        if not path.endswith(PREDICTION_SUFFIX)
    )
    if not paths:
        raise DataError("history directory {0} holds no day files".format(directory))
    days = [load_day(path, expected_steps=expected_steps) for path in paths]
    logger.info("history loaded days=%d first=%s last=%s", len(days), days[0].day_id, days[-1].day_id)
    return days


def load_prediction(path):
    """Hourly PV prediction table of a target day."""
    return _check_numeric(read_tsv(path, 'prediction file'), path, skip=())


def load_realization(path, resources, expected_steps=STEPS_PER_DAY):
    day = load_day(path, expected_steps=expected_steps, with_prediction=False)
    buses = day.demand_buses()
    demand_p, demand_q = day.demand(buses)
    names = [plant.name for plant in resources.pv_plants]
    missing = [PV_POTENTIAL_PREFIX + name for name in names if PV_POTENTIAL_PREFIX + name not in day.series.columns]
    if missing:
        raise DataError("{0} lacks columns: {1}".format(path, ', '.join(missing)))
    timestamps = day.series['timestamp_utc'].astype(str).tolist() if 'timestamp_utc' in day.series else None
    return RealizationData(
        day_id=day.day_id,
        buses=buses,
        demand_p_kw=demand_p,
        demand_q_kvar=demand_q,
        plant_names=names,
        pv_potential_kw=day.pv_potential(names),
        timestamps=timestamps,
    )


def load_plan(path):
    if not path or not os.path.exists(path):
        raise DataError("plan not found: {0}".format(path))
    frame = read_tsv(path, 'plan')
    for column in ('p_disp_kw', 'q_disp_kvar'):
        if column in frame.columns:
            frame[column] = pd.to_numeric(frame[column], errors='coerce')
            if frame[column].isna().any():
                raise DataError("plan {0}: column {1} is not numeric".format(path, column))
    return DispatchPlan.from_frame(frame, metadata={'source': path})


def write_plan(plan, path):
    return write_tsv(plan.to_frame(), path)
