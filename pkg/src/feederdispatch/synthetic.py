#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Seeded synthetic benchmark data.

Generates day files in the history format: residential-like demand for every
load of a resource set and PV potential for every plant, plus an hourly PV
prediction per day. Two target days are provided, a clear one and a cloudy
one whose prediction underestimates the realized PV.
"""

import logging
import os
import shutil

import numpy as np
import pandas as pd

from feederdispatch.datafiles import PREDICTION_SUFFIX, ensure_directory, file_access, write_tsv
from feederdispatch.forecasting import (
    DEMAND_P_PREFIX,
    DEMAND_Q_PREFIX,
    PV_POTENTIAL_PREFIX,
    PV_PREDICTION_PREFIX,
    CalendarTags,
    HistoricalDay,
    WEEKEND,
)
from feederdispatch.timegrid import STEPS_PER_DAY, STEPS_PER_HOUR, day_index, format_timestamps, parse_day

logger = logging.getLogger(__name__)

SUNRISE_H = 5.5
SUNSET_H = 20.5
DEMAND_PEAK_SHARE = 0.8
CLEAR_DAY = '2024-06-14'
CLOUDY_DAY = '2024-06-15'
HISTORY_START = '2024-05-10'
HISTORY_DAYS = 28


def _hours(steps):
    return np.arange(steps) / STEPS_PER_HOUR


def _rng(seed, day_id, salt=0):
    return np.random.default_rng([int(seed), parse_day(day_id).toordinal(), salt])


def clear_sky_profile(steps=STEPS_PER_DAY, peak_kw=1.0):
    """Sine-squared bell between sunrise and sunset, in kW."""
    hours = _hours(steps)
    phase = (hours - SUNRISE_H) / (SUNSET_H - SUNRISE_H)
    shape = np.where((phase > 0) & (phase < 1), np.sin(np.pi * phase) ** 2, 0.0)
    return peak_kw * shape


def cloud_factor(rng, steps=STEPS_PER_DAY, cloudiness=0.0, correlation=0.995):
    """Attenuation in [0, 1] from a clipped AR(1) process; 0 cloudiness gives ones."""
    if cloudiness <= 0:
        return np.ones(steps)
    noise = rng.normal(0.0, 1.0, steps)
    state = np.empty(steps)
    state[0] = noise[0]
    scale = np.sqrt(1.0 - correlation ** 2)
    for t in range(1, steps):
        state[t] = correlation * state[t - 1] + scale * noise[t]
    attenuation = cloudiness * (0.5 + 0.5 * np.tanh(1.5 * state))
    return np.clip(1.0 - attenuation, 0.05, 1.0)


def demand_profile(rng, steps=STEPS_PER_DAY, peak_kw=1.0, weekend=False, noise=0.05):
    """Residential-like day: night base, morning and evening peaks, white noise."""
    hours = _hours(steps)
    morning = 8.5 if weekend else 7.0
    shape = (
        0.30
        + 0.35 * np.exp(-0.5 * ((hours - morning) / 1.2) ** 2)
        + 0.25 * np.exp(-0.5 * ((hours - 13.0) / 2.0) ** 2)
        + 0.70 * np.exp(-0.5 * ((hours - 19.5) / 1.8) ** 2)
    )
    shape = shape / shape.max()
    values = peak_kw * shape * (1.0 + noise * rng.normal(0.0, 1.0, steps))
    return np.clip(values, 0.0, None)


def hourly_prediction(potential, rng, bias=1.0, noise=0.05):
    """Hourly means of a potential series, scaled by ``bias`` with multiplicative noise."""
    hourly = potential[:(potential.size // STEPS_PER_HOUR) * STEPS_PER_HOUR].reshape(-1, STEPS_PER_HOUR).mean(axis=1)
    return np.clip(hourly * bias * (1.0 + noise * rng.normal(0.0, 1.0, hourly.size)), 0.0, None)


def synth_day(day_id, resources, seed, cloudiness=0.0, prediction_bias=1.0, steps=STEPS_PER_DAY):
    """One day of realized series and its hourly PV prediction.

    Returns:
        (series, prediction) DataFrames in the day-file formats.
    """
    weekend = CalendarTags.for_day(day_id).day_type == WEEKEND
    data = {'timestamp_utc': format_timestamps(day_index(day_id, steps))}
    for k, load in enumerate(resources.loads):
        rng = _rng(seed, day_id, salt=100 + k)
        p = demand_profile(rng, steps, DEMAND_PEAK_SHARE * load.nominal_kva * load.power_factor, weekend)
        data[DEMAND_P_PREFIX + load.bus] = data.get(DEMAND_P_PREFIX + load.bus, 0.0) + p
        data[DEMAND_Q_PREFIX + load.bus] = data.get(DEMAND_Q_PREFIX + load.bus, 0.0) + p * load.tan_phi
    # one cloud field for the whole feeder
    clouds = cloud_factor(_rng(seed, day_id, salt=1), steps, cloudiness)
    prediction = {'hour': np.arange(int(np.ceil(steps / STEPS_PER_HOUR)))}
    for k, plant in enumerate(resources.pv_plants):
        potential = clear_sky_profile(steps, 0.95 * plant.rating_kva) * clouds
        data[PV_POTENTIAL_PREFIX + plant.name] = potential
        values = hourly_prediction(potential, _rng(seed, day_id, salt=200 + k), prediction_bias)
        prediction[PV_PREDICTION_PREFIX + plant.name] = np.pad(values, (0, prediction['hour'].size - values.size))
    return pd.DataFrame(data), pd.DataFrame(prediction)


def synth_history(resources, seed, start=HISTORY_START, days=HISTORY_DAYS, steps=STEPS_PER_DAY):
    """Consecutive history days with cloudiness drawn per day."""
    history = []
    for day in pd.date_range(start, periods=days, freq='D'):
        day_id = day.strftime('%Y-%m-%d')
        cloudiness = float(_rng(seed, day_id, salt=2).uniform(0.0, 0.9))
        series, prediction = synth_day(day_id, resources, seed, cloudiness=cloudiness, steps=steps)
        history.append(HistoricalDay(day_id=day_id, series=series, prediction=prediction))
    logger.info("synthetic history days=%d seed=%d", len(history), seed)
    return history


def benchmark_days(resources, seed, steps=STEPS_PER_DAY):
    """The clear-sky and cloudy target days as HistoricalDay objects.

    The cloudy day's prediction underestimates its potential, so the plan
    expects less PV than is realized.
    """
    clear = synth_day(CLEAR_DAY, resources, seed, cloudiness=0.0, steps=steps)
    cloudy = synth_day(CLOUDY_DAY, resources, seed, cloudiness=0.5, prediction_bias=0.6, steps=steps)
    return {
        'clear': HistoricalDay(day_id=CLEAR_DAY, series=clear[0], prediction=clear[1]),
        'cloudy': HistoricalDay(day_id=CLOUDY_DAY, series=cloudy[0], prediction=cloudy[1]),
    }


def _write_day(day, directory):
    write_tsv(day.series, os.path.join(directory, day.day_id + '.tsv'))
    write_tsv(day.prediction, os.path.join(directory, day.day_id + PREDICTION_SUFFIX))


def write_benchmark(directory, resources, seed, network_file=None, resources_file=None,
                    history_days=HISTORY_DAYS, steps=STEPS_PER_DAY):
    """Write history/, realization/ and copies of the feeder and resource files.

    Returns:
        dict of the written paths.
    """
    history_dir = os.path.join(directory, 'history')
    realization_dir = os.path.join(directory, 'realization')
    ensure_directory(history_dir)
    ensure_directory(realization_dir)
    for day in synth_history(resources, seed, days=history_days, steps=steps):
        _write_day(day, history_dir)
    paths = {'history_dir': history_dir}
    for label, day in benchmark_days(resources, seed, steps=steps).items():
        _write_day(day, realization_dir)
        paths[label] = os.path.join(realization_dir, day.day_id + '.tsv')
    for key, source in (('network_file', network_file), ('resources_file', resources_file)):
        if source:
            target = os.path.join(directory, os.path.basename(source))
            with file_access(target, 'copy ' + source + ' to'):
                shutil.copyfile(source, target)
            paths[key] = target
    logger.info("synthetic benchmark written directory=%s seed=%d", directory, seed)
    return paths
