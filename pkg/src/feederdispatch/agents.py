#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Worker harness for the distributed controller.

Each resource owns one single-thread worker; the calling thread plays the
aggregator. Every ADMM round submits all resource updates, then waits for all
of them (the barrier) and collects the results in resource order, so the
numbers do not depend on completion order.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor

from feederdispatch.errors import WorkerFailure
from feederdispatch.realtime_mpc import run_admm, sequential_updates

logger = logging.getLogger(__name__)


class AgentPool:
    """One single-thread executor per resource name.

    Args:
        delay: Optional callable(name) -> seconds slept by the worker before
            each update; used to shuffle completion order in tests.
    """

    def __init__(self, delay=None):
        self.delay = delay
        self._executors = {}

    def _executor(self, name):
        if name not in self._executors:
            self._executors[name] = ThreadPoolExecutor(max_workers=1, thread_name_prefix='agent-{0}'.format(name))
        return self._executors[name]

    def _run(self, agent, target, rho):
        if self.delay is not None:
            time.sleep(self.delay(agent.name))
        started = time.perf_counter()
        x = agent.update(target, rho)
        return x, time.perf_counter() - started

    def __call__(self, agents, targets, rho):
        futures = [
            self._executor(agent.name).submit(self._run, agent, target, rho)
            for agent, target in zip(agents, targets)
        ]
        results = []
        failure = None
        for agent, future in zip(agents, futures):
            try:
                results.append(future.result())
            except Exception as exc:
                if failure is None:
                    failure = WorkerFailure("worker {0} failed: {1}".format(agent.name, exc), resource=agent.name)
                    failure.__cause__ = exc
        if failure is not None:
            raise failure
        return results

    @property
    def workers(self):
        return sorted(self._executors)

    def close(self):
        for executor in self._executors.values():
            executor.shutdown(wait=True)
        self._executors = {}

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def run_agents(agents, aggregator, config=None, state=None, pool=None):
    """Distributed ADMM over a worker pool, sequential on worker failure.

    The result is identical to ``run_admm`` with the sequential executor.
    """
    owned = pool is None
    pool = pool or AgentPool()
    try:
        try:
            return run_admm(agents, aggregator, config=config, state=state, map_updates=pool)
        except WorkerFailure as exc:
            logger.warning("worker failure resource=%s, rerunning step sequentially: %s", exc.resource, exc)
            return run_admm(agents, aggregator, config=config, state=state, map_updates=sequential_updates)
    finally:
        if owned:
            pool.close()
