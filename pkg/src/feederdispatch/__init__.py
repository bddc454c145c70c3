#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Feeder Dispatch - two-layer dispatch of a low-voltage feeder

This package schedules a day-ahead dispatch plan at the grid connection
point of a low-voltage feeder from historical scenarios, and tracks the
plan in closed loop with a real-time model-predictive controller that
coordinates a battery and PV plants through ADMM, checked against an
exact AC power flow.
"""

__version__ = '0.3.0'
__author__ = 'Feeder Dispatch developers'
__description__ = 'Day-ahead scheduling and real-time ADMM dispatch of LV feeders'

__all__ = [
    'config',
    'cli',
    'errors',
    'grid_model',
    'convex_core',
    'resources',
    'forecasting',
    'day_ahead',
    'realtime_mpc',
    'agents',
    'timegrid',
    'simulator',
    'datafiles',
    'synthetic',
    'reporting',
]
