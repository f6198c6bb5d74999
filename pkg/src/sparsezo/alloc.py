"""Instrumented accounting of auxiliary buffer allocations.

The optimizer code paths route their scratch buffers through this module so
tests can measure peak auxiliary memory per path without relying on OS-level
RSS. Only optimizer-side buffers count: resident parameters, datasets, and
model activation buffers are outside the accounting (they are identical for
every path and belong to the inference baseline).

Accounting is per-process and not thread-safe; parallel runs use separate
worker processes.
"""

from contextlib import contextmanager

import numpy as np


class AllocationMeter:
    """Running byte counter with a high-water mark."""

    __slots__ = ("current", "peak")

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, nbytes):
        self.current += int(nbytes)
        if self.current > self.peak:
            self.peak = self.current

    def release(self, nbytes):
        self.current -= int(nbytes)


_active = None


def active_meter():
    """The currently installed meter, or None when tracking is off."""
    return _active


@contextmanager
def track():
    """Install a fresh meter for the duration of the block and yield it."""
    global _active
    previous = _active
    meter = AllocationMeter()
    _active = meter
    try:
        yield meter
    finally:
        _active = previous


@contextmanager
def tracked(array):
    """Count an existing array against the active meter for the block."""
    meter = _active
    if meter is not None:
        meter.add(array.nbytes)
    try:
        yield array
    finally:
        if meter is not None:
            meter.release(array.nbytes)


@contextmanager
def scratch(shape, dtype):
    """Allocate a metered scratch buffer, released at block exit."""
    array = np.empty(shape, dtype=dtype)
    with tracked(array):
        yield array


def register(array):
    """Count an array that outlives any single block; pair with unregister."""
    meter = _active
    if meter is not None:
        meter.add(array.nbytes)


def unregister(array):
    meter = _active
    if meter is not None:
        meter.release(array.nbytes)
