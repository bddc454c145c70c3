#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Scenario selection for the day-ahead layer and persistence prediction for the
real-time layer.

PV scenarios are the realizations of the historical days whose stored
day-ahead predictions are closest to the target prediction. Demand scenarios
are the most recent historical days sharing the target's calendar tags.
All scenario values are injections (positive into the feeder): PV potential
enters as is, demand with a minus sign.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from feederdispatch.errors import DataError
from feederdispatch.timegrid import parse_day

logger = logging.getLogger(__name__)

DEMAND_P_PREFIX = 'demand_p_kw_'
DEMAND_Q_PREFIX = 'demand_q_kvar_'
PV_POTENTIAL_PREFIX = 'pv_potential_kw_'
PV_PREDICTION_PREFIX = 'pv_prediction_kw_'

WEEKDAY = 'weekday'
WEEKEND = 'weekend'
SEASONS = {
    12: 'winter', 1: 'winter', 2: 'winter',
    3: 'spring', 4: 'spring', 5: 'spring',
    6: 'summer', 7: 'summer', 8: 'summer',
    9: 'autumn', 10: 'autumn', 11: 'autumn',
}

PERSISTENCE_WINDOW = 4


@dataclass(frozen=True)
class CalendarTags:
    """Calendar information used to match demand days; None matches anything."""

    day_type: str = None
    day_of_week: int = None
    season: str = None

    @classmethod
    def for_day(cls, day_id):
        date = parse_day(day_id)
        return cls(
            day_type=WEEKEND if date.dayofweek >= 5 else WEEKDAY,
            day_of_week=int(date.dayofweek),
            season=SEASONS[date.month],
        )

    def matches(self, other):
        return all(
            mine is None or mine == theirs
            for mine, theirs in (
                (self.day_type, other.day_type),
                (self.day_of_week, other.day_of_week),
                (self.season, other.season),
            )
        )

    def relaxations(self):
        """Progressively looser tag sets: drop season, then day of week, then day type."""
        levels = [self, replace(self, season=None), replace(self, season=None, day_of_week=None), CalendarTags()]
        unique = []
        for level in levels:
            if level not in unique:
                unique.append(level)
        return unique


@dataclass(frozen=True, eq=False)
class HistoricalDay:
    """One day of realized 30-s series plus its hourly PV prediction.

    ``series`` holds demand_p_kw_<bus>, demand_q_kvar_<bus> and
    pv_potential_kw_<plant> columns; ``prediction`` holds hour and
    pv_prediction_kw_<plant> columns (may be None for demand-only days).
    """

    day_id: str
    series: object
    prediction: object = None
    tags: CalendarTags = None

    def __post_init__(self):
        if self.tags is None:
            object.__setattr__(self, 'tags', CalendarTags.for_day(self.day_id))
        if self.series is None or len(self.series) == 0:
            raise DataError("history day {0} has no samples".format(self.day_id))

    @property
    def steps(self):
        return len(self.series)

    def demand_buses(self):
        return [c[len(DEMAND_P_PREFIX):] for c in self.series.columns if c.startswith(DEMAND_P_PREFIX)]

    def _columns(self, names):
        missing = [name for name in names if name not in self.series.columns]
        if missing:
            raise DataError("history day {0} lacks columns: {1}".format(self.day_id, ', '.join(missing)))
        return self.series[names].to_numpy(dtype=float)

    def demand(self, buses):
        """Demand (p, q) per bus, arrays of shape (steps, len(buses))."""
        p = self._columns([DEMAND_P_PREFIX + bus for bus in buses])
        q = self._columns([DEMAND_Q_PREFIX + bus for bus in buses])
        return p, q

    def pv_potential(self, plant_names):
        return self._columns([PV_POTENTIAL_PREFIX + name for name in plant_names])

    def prediction_vector(self, plant_names):
        if self.prediction is None:
            raise DataError("history day {0} has no PV prediction".format(self.day_id))
        names = [PV_PREDICTION_PREFIX + name for name in plant_names]
        missing = [name for name in names if name not in self.prediction.columns]
        if missing:
            raise DataError("prediction of {0} lacks columns: {1}".format(self.day_id, ', '.join(missing)))
        return self.prediction[names].to_numpy(dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """s scenarios of per-bus injections over a horizon: arrays (s, T, buses)."""

    buses: tuple
    p_kw: np.ndarray
    q_kvar: np.ndarray
    source_days: tuple = ()
    warnings: tuple = ()

    def __post_init__(self):
        p = np.array(self.p_kw, dtype=float)
        q = np.array(self.q_kvar, dtype=float)
        buses = tuple(self.buses)
        if p.ndim != 3 or p.shape != q.shape:
            raise DataError("scenario arrays must share a (s, T, buses) shape, got {0} and {1}".format(
                p.shape, q.shape))
        if p.shape[0] < 1:
            raise DataError("a scenario set needs at least one scenario")
        if p.shape[2] != len(buses):
            raise DataError("scenario arrays cover {0} buses, {1} named".format(p.shape[2], len(buses)))
        object.__setattr__(self, 'buses', buses)
        object.__setattr__(self, 'p_kw', p)
        object.__setattr__(self, 'q_kvar', q)
        object.__setattr__(self, 'source_days', tuple(self.source_days))
        object.__setattr__(self, 'warnings', tuple(self.warnings))

    @property
    def n_scenarios(self):
        return self.p_kw.shape[0]

    @property
    def horizon(self):
        return self.p_kw.shape[1]

    def permuted(self, order):
        order = list(order)
        return replace(
            self,
            p_kw=self.p_kw[order],
            q_kvar=self.q_kvar[order],
            source_days=tuple(self.source_days[k] for k in order) if self.source_days else (),
        )

    def truncated(self, steps):
        return replace(self, p_kw=self.p_kw[:, :steps], q_kvar=self.q_kvar[:, :steps])


def _plant_buses(plants):
    buses = []
    for plant in plants:
        if plant.bus not in buses:
            buses.append(plant.bus)
    return buses


def _pv_injection(day, plants, buses):
    potential = day.pv_potential([plant.name for plant in plants])
    out = np.zeros((potential.shape[0], len(buses)))
    for k, plant in enumerate(plants):
        out[:, buses.index(plant.bus)] += potential[:, k]
    return out


def select_pv_scenarios(target_prediction, history, s, plants):
    """The s realizations whose stored predictions are closest to the target.

    Args:
        target_prediction: Hourly prediction, array (hours, plants) or flat.
        history: list of HistoricalDay.
        s: scenario count.
        plants: PvParams in the column order of the prediction.

    Returns:
        ScenarioSet of PV potential injections, ordered by distance then day id.
    """
    if not history:
        raise DataError("PV scenario selection needs a non-empty history")
    if not 1 <= s <= len(history):
        raise DataError("cannot select {0} PV scenarios from {1} history days".format(s, len(history)))
    names = [plant.name for plant in plants]
    target = np.asarray(target_prediction, dtype=float).reshape(-1)
    ranked = []
    for day in history:
        stored = day.prediction_vector(names)
        if stored.size != target.size:
            raise DataError("prediction of {0} has {1} values, target has {2}".format(
                day.day_id, stored.size, target.size))
        ranked.append((float(np.linalg.norm(stored - target)), day.day_id, day))
    ranked.sort(key=lambda item: (item[0], item[1]))
    chosen = [item[2] for item in ranked[:s]]
    logger.debug("pv scenarios days=%s", ','.join(day.day_id for day in chosen))

    buses = _plant_buses(plants)
    p = np.stack([_pv_injection(day, plants, buses) for day in chosen])
    return ScenarioSet(buses=buses, p_kw=p, q_kvar=np.zeros_like(p), source_days=[d.day_id for d in chosen])


def select_demand_scenarios(tags, history, s, buses=None):
    """The s most recent days sharing ``tags``, relaxing the tags when too few match.

    Relaxation drops season first, then day of week, then day type; each
    relaxation is logged and recorded in ``ScenarioSet.warnings``.
    """
    if not history:
        raise DataError("demand scenario selection needs a non-empty history")
    if s < 1:
        raise DataError("scenario count must be at least 1")
    warnings = []
    chosen = None
    for level, relaxed in enumerate(tags.relaxations()):
        matching = sorted((day for day in history if relaxed.matches(day.tags)), key=lambda d: d.day_id, reverse=True)
        if len(matching) >= s:
            chosen = matching[:s]
            if level:
                message = "calendar fallback: {0} days match {1}, relaxed to {2}".format(
                    sum(1 for day in history if tags.matches(day.tags)), tags, relaxed)
                logger.warning("demand scenarios %s", message)
                warnings.append(message)
            break
    if chosen is None:
        raise DataError("cannot select {0} demand scenarios from {1} history days".format(s, len(history)))

    buses = list(buses) if buses is not None else chosen[0].demand_buses()
    p = []
    q = []
    for day in chosen:
        demand_p, demand_q = day.demand(buses)
        p.append(-demand_p)
        q.append(-demand_q)
    return ScenarioSet(
        buses=buses, p_kw=np.stack(p), q_kvar=np.stack(q),
        source_days=[d.day_id for d in chosen], warnings=warnings,
    )


def combine_scenarios(pv_set, demand_set):
    """Pair the k-th PV scenario with the k-th demand scenario into nodal injections."""
    if pv_set.n_scenarios != demand_set.n_scenarios:
        raise DataError("PV and demand sets hold {0} and {1} scenarios".format(
            pv_set.n_scenarios, demand_set.n_scenarios))
    if pv_set.horizon != demand_set.horizon:
        raise DataError("PV and demand sets cover {0} and {1} steps".format(pv_set.horizon, demand_set.horizon))
    buses = list(demand_set.buses) + [bus for bus in pv_set.buses if bus not in demand_set.buses]
    shape = (pv_set.n_scenarios, pv_set.horizon, len(buses))
    p = np.zeros(shape)
    q = np.zeros(shape)
    for source in (demand_set, pv_set):
        for k, bus in enumerate(source.buses):
            j = buses.index(bus)
            p[:, :, j] += source.p_kw[:, :, k]
            q[:, :, j] += source.q_kvar[:, :, k]
    sources = [
        '{0}+{1}'.format(pv_day, demand_day)
        for pv_day, demand_day in zip(pv_set.source_days, demand_set.source_days)
    ]
    return ScenarioSet(
        buses=buses, p_kw=p, q_kvar=q, source_days=sources,
        warnings=pv_set.warnings + demand_set.warnings,
    )


def net_demand(scenarios):
    """Aggregated demand minus generation per scenario and step, shape (s, T)."""
    return -scenarios.p_kw.sum(axis=2)


def persistence_forecast(recent, horizon, window=PERSISTENCE_WINDOW):
    """Trailing-window mean repeated over the horizon.

    ``recent`` is a 1-D series or a (samples, series) array; NaN samples are
    ignored. Returns an array of shape (horizon,) or (horizon, series).
    """
    values = np.asarray(recent, dtype=float)
    if values.ndim == 0:
        values = values.reshape(1)
    if horizon < 0:
        raise DataError("forecast horizon must be non-negative")
    tail = values[-window:]
    if tail.shape[0] == 0:
        raise DataError("persistence forecast needs at least one recent measurement")
    counts = np.sum(np.isfinite(tail), axis=0)
    if np.any(counts == 0):
        raise DataError("persistence forecast window holds no finite measurement")
    mean = np.nansum(tail, axis=0) / counts
    if values.ndim == 1:
        return np.full(horizon, float(mean))
    return np.tile(mean, (horizon, 1))
