#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Command-line entrypoint for Feeder Dispatch.

Commands:
    schedule  day-ahead dispatch plan from history and the target day's PV prediction
    run       closed-loop replay of a realized day against a plan
    report    tracking and computation tables of an existing trace
    sweep     plan quality over λ, or closed-loop runs over battery unit counts
    synth     write a seeded synthetic benchmark directory
"""

import argparse
import logging
import os
import sys

import yaml

from feederdispatch import __version__
from feederdispatch import datafiles, reporting, simulator, synthetic
from feederdispatch.config import config
from feederdispatch.day_ahead import build_dayahead, plan_reliability_mrmse, solve_dayahead
from feederdispatch.errors import EXIT_OK, EXIT_USAGE, DataError, FeederDispatchError, UnexpectedError
from feederdispatch.forecasting import (
    CalendarTags,
    combine_scenarios,
    select_demand_scenarios,
    select_pv_scenarios,
)

logger = logging.getLogger(__name__)

RUN_FAILED = 'RUN_FAILED'
SWEEP_KINDS = ('lambda', 'bess')


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "{0}: error: {1}\n".format(self.prog, message))


def parse_float_list(text):
    """Comma-separated floats; an empty string gives an empty list."""
    values = [item.strip() for item in str(text).split(',') if item.strip()]
    try:
        return [float(item) for item in values]
    except ValueError:
        raise DataError("--lambda must be a comma-separated list of numbers, got {0!r}".format(text))


def configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
    )


def apply_overrides(args):
    """Load the config file and route flags into the runtime layer."""
    config.load_config(
        config_file=getattr(args, 'config', None),
        network_file=getattr(args, 'network', None),
        resources_file=getattr(args, 'resources', None),
        history_dir=getattr(args, 'history', None),
        realization_file=getattr(args, 'realization', None),
        plan_file=getattr(args, 'plan', None),
        mode=getattr(args, 'mode', None),
        output_dir=getattr(args, 'out', None),
        seed=getattr(args, 'seed', None),
        scenarios=getattr(args, 'scenarios', None),
        max_steps=getattr(args, 'max_steps', None),
    )


def error_block(exc):
    """Machine-readable description of a failure, printed to stderr."""
    block = {'kind': exc.kind, 'message': str(exc), 'exit_code': exc.exit_code}
    details = {key: value for key, value in exc.details().items() if value is not None}
    if details:
        block['details'] = details
    return yaml.safe_dump(datafiles.plain({'error': block}), sort_keys=False, default_flow_style=False)


def load_inputs(with_realization=True):
    network = datafiles.load_network(config.network_file)
    resources = datafiles.load_resources(config.resources_file, network=network)
    realization = None
    if with_realization:
        if not config.realization_file:
            raise DataError("no realization file given (--realization or realization_file)")
        realization = datafiles.load_realization(config.realization_file, resources)
    return network, resources, realization


def build_scenarios(resources, day_id, s):
    """Day-ahead injection scenarios for a target day from the history directory."""
    history = datafiles.load_history(config.history_dir)
    prediction_file = datafiles.prediction_path(config.realization_file)
    plants = list(resources.pv_plants)
    scenario_sets = []
    if plants:
        target = datafiles.load_prediction(prediction_file)
        names = ['pv_prediction_kw_' + plant.name for plant in plants]
        missing = [name for name in names if name not in target.columns]
        if missing:
            raise DataError("{0} lacks columns: {1}".format(prediction_file, ', '.join(missing)))
        scenario_sets.append(select_pv_scenarios(target[names].to_numpy().reshape(-1), history, s, plants))
    demand = select_demand_scenarios(CalendarTags.for_day(day_id), history, s)
    if not scenario_sets:
        return demand
    return combine_scenarios(scenario_sets[0], demand)


def lambda_weights(resources, override=None):
    if override is not None:
        return {b.name: override for b in resources.batteries}
    return {b.name: config.lambda_for(b.name) for b in resources.batteries}


def handle_schedule(args):
    network, resources, realization = load_inputs()
    values = parse_float_list(args.lambda_) if args.lambda_ is not None else None
    if values is not None and len(values) != 1:
        raise DataError("schedule takes a single --lambda value, got {0}".format(len(values)))
    scenarios = build_scenarios(resources, realization.day_id, config.scenarios)
    dayahead = build_dayahead(
        network, scenarios, resources, config.grid_limits(network), config.pf_limit(),
        lambda_weights(resources, values[0] if values else None),
        deviation=config.deviation, day_id=realization.day_id,
    )
    solution = solve_dayahead(dayahead, config.solver_config(), metadata={'day': realization.day_id})
    score = plan_reliability_mrmse(solution.plan, solution.p0)

    out = config.output_dir
    plan_path = datafiles.write_plan(solution.plan, config.plan_file)
    for name in solution.batteries:
        datafiles.write_tsv(solution.battery_frame(name), os.path.join(out, 'battery_{0}_scenarios.tsv'.format(name)))
    summary = {
        'day': realization.day_id,
        'scenarios': scenarios.n_scenarios,
        'source_days': list(scenarios.source_days),
        'warnings': list(scenarios.warnings),
        'mrmse': score.value,
        'mrmse_mode': score.mode,
        'mrmse_per_scenario': list(score.per_scenario),
        'diagnostics': solution.diagnostics,
    }
    datafiles.write_yaml(summary, os.path.join(out, 'schedule.yaml'))
    reporting.write_series(reporting.dayahead_series(solution, scenarios), out)
    print("Wrote plan to {0} ({1} steps, {2} scenarios, mRMSE {3:.3f} {4})".format(
        plan_path, len(solution.plan), scenarios.n_scenarios, score.value, score.mode))
    return EXIT_OK


def write_run_outputs(trace, out, network, limits, plan):
    frame_path = datafiles.write_tsv(trace.frame, os.path.join(out, 'trace.tsv'))
    datafiles.write_tsv(trace.timings, os.path.join(out, 'timings.tsv'))
    metrics = simulator.compute_metrics(trace, plan)
    datafiles.write_yaml(metrics.to_dict(), os.path.join(out, 'metrics.yaml'))
    datafiles.write_yaml(metrics.to_dict(include_timing=True), os.path.join(out, 'timing.yaml'))
    audit = simulator.audit_frame(simulator.audit_trace(trace, network, limits))
    datafiles.write_tsv(audit, os.path.join(out, 'audit.tsv'))
    reporting.write_series(reporting.closed_loop_series(trace), out)
    return frame_path, metrics, audit


def write_failure_marker(exc, out, marker):
    """RUN_FAILED with the error block, next to the partial trace when there is one."""
    try:
        trace = getattr(exc, 'trace', None)
        if trace is not None:
            datafiles.write_tsv(trace.frame, os.path.join(out, 'trace.tsv'))
        datafiles.ensure_directory(out)
        with datafiles.file_access(marker, 'write'), open(marker, 'w') as handle:
            handle.write(error_block(exc))
    except DataError as marker_error:
        logger.warning("cannot write failure marker %s: %s", marker, marker_error)


def handle_run(args):
    plan = datafiles.load_plan(config.plan_file)
    network, resources, realization = load_inputs()
    settings = simulator.LoopSettings.from_config(config, network)
    mode = config.mode
    out = config.output_dir
    marker = os.path.join(out, RUN_FAILED)
    if os.path.exists(marker):
        with datafiles.file_access(marker, 'remove'):
            os.remove(marker)
    try:
        trace = simulator.run_closed_loop(plan, realization, network, resources, mode, settings)
        frame_path, metrics, audit = write_run_outputs(trace, out, network, settings.limits, plan)
    except Exception as exc:
        failure = exc if isinstance(exc, FeederDispatchError) else UnexpectedError(exc)
        write_failure_marker(failure, out, marker)
        raise
    print("Wrote trace to {0} ({1} steps, mode {2})".format(frame_path, trace.steps, mode))
    print(reporting.tracking_table(metrics))
    print(reporting.computation_table(metrics))
    print("Constraint audit: {0} violations".format(len(audit)))
    return EXIT_OK


def handle_report(args):
    out = config.output_dir
    trace_path = args.trace or os.path.join(out, 'trace.tsv')
    frame = datafiles.read_tsv(trace_path, 'trace')
    timings_path = os.path.join(os.path.dirname(trace_path), 'timings.tsv')
    timings = datafiles.read_tsv(timings_path, 'timings') if os.path.exists(timings_path) else None
    trace = simulator.SimulationTrace.from_frame(frame, timings=timings)
    plan = datafiles.load_plan(args.plan_path) if args.plan_path else None
    metrics = simulator.compute_metrics(trace, plan)
    text = '\n\n'.join([reporting.tracking_table(metrics), reporting.computation_table(metrics)])
    report_path = os.path.join(datafiles.ensure_directory(out), 'report.txt')
    with datafiles.file_access(report_path, 'write'), open(report_path, 'w') as handle:
        handle.write(text + '\n')
    datafiles.write_yaml(metrics.to_dict(), os.path.join(out, 'metrics.yaml'))
    reporting.write_series(reporting.closed_loop_series(trace), out)
    print(text)
    return EXIT_OK


def handle_sweep(args):
    out = config.output_dir
    if args.sweep == 'lambda':
        network, resources, realization = load_inputs()
        values = parse_float_list(args.lambda_) if args.lambda_ is not None else config.lambda_values
        scenarios = build_scenarios(resources, realization.day_id, config.scenarios)
        summary = simulator.sweep_lambda(
            network, scenarios, resources, config.grid_limits(network), config.pf_limit(), values,
            deviation=config.deviation, solver_config=config.solver_config(), day_id=realization.day_id,
        )
        path = datafiles.write_tsv(summary, os.path.join(out, 'sweep_lambda.tsv'))
        print(reporting.lambda_table(summary))
    else:
        plan = datafiles.load_plan(config.plan_file)
        network, resources, realization = load_inputs()
        settings = simulator.LoopSettings.from_config(config, network)
        summary, times = simulator.sweep_bess(
            plan, realization, network, resources, config.bess_counts, config.bess_buses, settings)
        path = datafiles.write_tsv(summary, os.path.join(out, 'sweep_bess.tsv'))
        datafiles.write_tsv(times, os.path.join(out, reporting.PLOTS_DIR, 'compute_times.tsv'))
        print(reporting.bess_table(summary))
    print("Wrote sweep summary to {0}".format(path))
    return EXIT_OK


def handle_synth(args):
    out = config.output_dir
    network_file = config.network_file
    resources_file = config.resources_file
    network = datafiles.load_network(network_file)
    resources = datafiles.load_resources(resources_file, network=network)
    paths = synthetic.write_benchmark(
        out, resources, config.seed, network_file=network_file, resources_file=resources_file)
    settings = {
        'network_file': os.path.basename(paths['network_file']),
        'resources_file': os.path.basename(paths['resources_file']),
        'history_dir': 'history',
        'realization_file': os.path.relpath(paths['clear'], out),
        'output_dir': 'output',
        'seed': config.seed,
    }
    datafiles.write_yaml(settings, os.path.join(out, 'feederdispatch.yaml'))
    print("Wrote synthetic benchmark to {0} (clear day {1}, cloudy day {2})".format(
        out, os.path.basename(paths['clear']), os.path.basename(paths['cloudy'])))
    return EXIT_OK


def _add_common(parser, *flags):
    parser.add_argument('--config', '-c', default=None, help='Optional feederdispatch.yaml path')
    parser.add_argument('--verbose', '-v', action='store_true', help='Log debug messages to stderr')
    parser.add_argument('--out', '-o', default=None, help='Output directory')
    options = {
        'network': dict(help='Feeder YAML file'),
        'resources': dict(help='Resource YAML file'),
        'history': dict(help='Directory of historical day files'),
        'realization': dict(help='Realized day file of the target day'),
        'plan': dict(help='Dispatch plan TSV'),
        'mode': dict(choices=['centralized', 'distributed'], help='Real-time controller form'),
        'seed': dict(type=int, help='Seed of the synthetic data'),
        'scenarios': dict(type=int, help='Number of day-ahead scenarios'),
        'lambda': dict(dest='lambda_', help='Battery weight λ, comma-separated for sweeps'),
        'max-steps': dict(type=int, dest='max_steps', help='Stop the closed loop after this many steps'),
    }
    for flag in flags:
        parser.add_argument('--' + flag, default=None, **options[flag])


def build_cli_parser():
    """Build the top-level CLI parser."""
    parser = CliParser(
        prog='feederdispatch',
        description=(
            'Day-ahead dispatch planning and real-time tracking of a low-voltage feeder. '
            'If --config is omitted, ./feederdispatch.yaml or ./config.yaml is used when present.'
        ),
    )
    parser.add_argument('--version', action='version', version='feederdispatch {0}'.format(__version__))
    subparsers = parser.add_subparsers(dest='command', required=True, parser_class=CliParser)

    schedule_parser = subparsers.add_parser('schedule', help='Compute the day-ahead dispatch plan')
    _add_common(schedule_parser, 'network', 'resources', 'history', 'realization', 'plan', 'scenarios', 'lambda')
    schedule_parser.set_defaults(handler=handle_schedule)

    run_parser = subparsers.add_parser('run', help='Replay a realized day in closed loop')
    _add_common(run_parser, 'network', 'resources', 'realization', 'plan', 'mode', 'max-steps')
    run_parser.set_defaults(handler=handle_run)

    report_parser = subparsers.add_parser('report', help='Summarize an existing trace')
    _add_common(report_parser)
    report_parser.add_argument('trace', nargs='?', default=None, help='Trace TSV; defaults to <out>/trace.tsv')
    report_parser.add_argument('--plan', dest='plan_path', default=None, help='Plan TSV to compare against')
    report_parser.set_defaults(handler=handle_report)

    sweep_parser = subparsers.add_parser('sweep', help='Run the λ or battery-count sweep')
    _add_common(sweep_parser, 'network', 'resources', 'history', 'realization', 'plan', 'scenarios', 'lambda',
                'max-steps')
    sweep_parser.add_argument('--sweep', required=True, choices=SWEEP_KINDS, help='Sweep kind')
    sweep_parser.set_defaults(handler=handle_sweep)

    synth_parser = subparsers.add_parser('synth', help='Write a synthetic benchmark directory')
    _add_common(synth_parser, 'network', 'resources', 'seed')
    synth_parser.set_defaults(handler=handle_synth)
    return parser


def main(argv=None):
    """Run the CLI; returns the process exit code."""
    parser = build_cli_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    snapshot = config.snapshot_state()
    try:
        apply_overrides(args)
        return args.handler(args)
    except FeederDispatchError as exc:
        logger.debug("command %s failed", args.command, exc_info=True)
        sys.stderr.write(error_block(exc))
        return exc.exit_code
    except Exception as exc:
        logger.debug("command %s failed unexpectedly", args.command, exc_info=True)
        wrapped = UnexpectedError(exc)
        sys.stderr.write(error_block(wrapped))
        return wrapped.exit_code
    finally:
        config.restore_state(snapshot)


if __name__ == '__main__':
    raise SystemExit(main())
