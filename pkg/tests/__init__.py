"""Tests package for Feeder Dispatch"""
