#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""UTC time grid shared by plans, histories, realizations and traces."""

import numpy as np
import pandas as pd

from feederdispatch.errors import DataError

STEP_SECONDS = 30
STEPS_PER_DAY = 24 * 3600 // STEP_SECONDS
STEPS_PER_HOUR = 3600 // STEP_SECONDS


def parse_day(day_id):
    """'YYYY-MM-DD' to a UTC midnight Timestamp."""
    try:
        return pd.Timestamp(day_id, tz='UTC').normalize()
    except (TypeError, ValueError):
        raise DataError("invalid day id {0!r}, expected YYYY-MM-DD".format(day_id))


def day_index(day_id, steps=STEPS_PER_DAY):
    """Step timestamps of one day starting at 00:00 UTC."""
    return pd.date_range(parse_day(day_id), periods=steps, freq='{0}s'.format(STEP_SECONDS), tz='UTC')


def format_timestamps(index):
    return [ts.strftime('%Y-%m-%dT%H:%M:%SZ') for ts in index]


def hourly_to_steps(values, steps=STEPS_PER_DAY):
    """Repeat hourly values onto the step grid."""
    values = np.asarray(values, dtype=float)
    expanded = np.repeat(values, STEPS_PER_HOUR, axis=0)
    return expanded[:steps]
