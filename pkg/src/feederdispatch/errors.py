#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Exception hierarchy shared by every layer of the dispatch pipeline.

Every error carries the process exit code the CLI reports for it and a short
``kind`` label used in the machine-readable error block.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class FeederDispatchError(Exception):
    """Base class for all expected failures."""

    exit_code = EXIT_NUMERIC
    kind = 'error'

    def details(self):
        """Extra key/value pairs for the CLI error block."""
        return {}


class DataError(FeederDispatchError, ValueError):
    """Malformed input files, invalid parameters or mismatched dimensions."""

    exit_code = EXIT_DATA
    kind = 'data'


class TopologyError(DataError):
    """Network graph without lines, or with unreachable buses."""

    kind = 'topology'


class NumericError(FeederDispatchError, ArithmeticError):
    """A numerical procedure failed on otherwise valid inputs."""

    exit_code = EXIT_NUMERIC
    kind = 'numeric'


class PowerFlowDivergence(NumericError):
    """Newton-Raphson did not reach the mismatch tolerance."""

    kind = 'power-flow-divergence'

    def __init__(self, message, mismatch=None, iterations=None):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations

    def details(self):
        return {'mismatch': self.mismatch, 'iterations': self.iterations}


class DegenerateOperatingPoint(NumericError):
    """The power-flow Jacobian is singular at the linearization point."""

    kind = 'degenerate-operating-point'


class SolverFailure(NumericError):
    """The convex solver returned a non-optimal status."""

    kind = 'solver-failure'

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution

    def details(self):
        if self.solution is None:
            return {}
        return {
            'status': self.solution.status.value,
            'iterations': self.solution.iterations,
            'primal_residual': float(self.solution.residuals.primal),
            'stationarity': float(self.solution.residuals.stationarity),
        }


class SimulationAborted(NumericError):
    """The closed loop stopped before the end of the day."""

    kind = 'simulation-aborted'

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace

    def details(self):
        return {'step': self.step}


class WorkerFailure(NumericError):
    """A resource worker raised during a distributed update."""

    kind = 'worker-failure'

    def __init__(self, message, resource=None):
        super().__init__(message)
        self.resource = resource

    def details(self):
        return {'resource': self.resource}


class UnexpectedError(FeederDispatchError):
    """Any other exception escaping a command, reported with its type."""

    kind = 'unexpected'

    def __init__(self, exc):
        super().__init__("{0}: {1}".format(type(exc).__name__, exc))
        self.error_type = type(exc).__name__

    def details(self):
        return {'type': self.error_type}
