import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

import settings
from config import load_config
from core_model import FOUR_CORE_EXPRESSIONS, LatencyModel, split_address
from errors import (
    AddressRangeError,
    ArgumentError,
    CapacityError,
    ConfigError,
    GeometryError,
    InsufficientPoolError,
    InvariantViolationError,
    PipelineError,
    TraceParseError,
)
from eviction_graph import (
    BlockGroups,
    connected_components,
    diagnostics_frame,
    extract_edges,
    find_conflict_edges,
    purity_problems,
    write_groups,
)
from partition import ColorScheme, plan_partition, verify_disjoint, write_plan
from probe import LatencyOracle, crack_without_trace, two_thread_experiment
from simulator import (
    SlicedCache,
    WorkloadConfig,
    a2_range_addresses,
    read_trace,
    run_workload,
    write_trace,
)
from solver import (
    analytic_stride_oracle,
    consistency_report,
    crack_groups,
    stride_scan,
    verify_recovered,
)

logger = logging.getLogger('slice_cracker')

USAGE_ERRORS = (ConfigError, ArgumentError, TraceParseError, GeometryError,
                AddressRangeError, CapacityError)
PIPELINE_ERRORS = (PipelineError, InvariantViolationError, InsufficientPoolError)


def parse_arguments(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description='Crack the slice hash of a sliced last-level cache against a simulated planted hash'
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True,
                        help='JSON run config (see configs/)')
    common.add_argument('--out',
                        help='Directory to save output files (default: config output_dir or output)')
    common.add_argument('--seed', type=int,
                        help='Seed overriding the config seed')
    common.add_argument('--noise', type=float,
                        help='Latency noise as a fraction of L_memory (e.g. 0.05)')
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help='More logging (-v info, -vv debug)')

    subparsers.add_parser('stride-scan', parents=[common],
                          help='Latency knee per stride and the implied geometry')
    subparsers.add_parser('gen-trace', parents=[common],
                          help='Run the pointer-chase workload and write its memory trace')
    classify = subparsers.add_parser('classify', parents=[common],
                                     help='Classify blocks from a trace into slice groups')
    classify.add_argument('--trace',
                          help='Trace CSV to classify (default: <out>/trace.csv, generated if missing)')
    subparsers.add_parser('crack', parents=[common],
                          help='Simulate, classify and solve for the slice hash')
    subparsers.add_parser('probe', parents=[common],
                          help='Classify a block pool using latency measurements only')
    subparsers.add_parser('partition', parents=[common],
                          help='Plan page-color partitions and verify they are disjoint')
    subparsers.add_parser('report', parents=[common],
                          help='Consolidated text report')

    return parser.parse_args(argv)


def _write_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator='\n')
    print(f"Saved {path}")


def _workload_config(config, addresses):
    workload = config.workload
    return WorkloadConfig.for_laps(
        addresses,
        workload.laps,
        shuffle_seed=workload.shuffle_seed,
        dirty_writes=workload.dirty_writes,
        idle_gap=workload.idle_gap,
        trace_warmup=workload.trace_warmup,
        reshuffle_laps=workload.reshuffle_laps,
    )


def cmd_stride_scan(config, args):
    deterministic = LatencyModel(config.latency.l_llc, config.latency.l_memory)
    oracle = analytic_stride_oracle(config.geom, deterministic)
    print(f"Scanning {len(config.stride_scan.strides)} strides...")
    result = stride_scan(oracle, config.stride_scan.strides, max_blocks=config.stride_scan.max_blocks)
    _write_csv(result.knees, os.path.join(config.output_dir, 'knees.csv'))
    if result.set_index_bits is not None:
        print(f"Offset bits: {result.offset_bits}, set-index bits: {result.set_index_bits}, "
              f"lines at saturation: {result.saturated_capacity}")
    if result.inconclusive:
        print(f"Warning: no knee for strides {result.inconclusive}")
    if result.rejected:
        print(f"Warning: strides {result.rejected} cannot be measured and were skipped")
    return 0


def cmd_gen_trace(config, args):
    addresses = config.workload.all_addresses
    if not addresses:
        raise PipelineError("no events: the workload has no blocks")
    cache = SlicedCache(config.geom, config.planted_hash, config.workload.policy)
    print(f"Running pointer chase over {len(addresses)} blocks...")
    run = run_workload(cache, _workload_config(config, addresses))
    path = os.path.join(config.output_dir, 'trace.csv')
    write_trace(run.trace, path)
    print(f"Saved {path}")
    print(f"Accesses: {run.stats.accesses}, misses: {run.stats.misses}, "
          f"write-backs: {run.stats.write_backs}, events: {len(run.trace)}")
    return 0


def _classify_trace(trace, blocks):
    extraction = extract_edges(trace)
    groups = connected_components(extraction.edges, blocks)
    conflicts = find_conflict_edges(extraction.edges)
    return extraction, groups, conflicts


def cmd_classify(config, args):
    path = args.trace or os.path.join(config.output_dir, 'trace.csv')
    if not os.path.exists(path):
        cmd_gen_trace(config, args)
    with open(path) as handle:
        trace = read_trace(handle)
    if not len(trace):
        raise PipelineError(f"no events in {path}")
    extraction, groups, conflicts = _classify_trace(trace, config.workload.all_addresses)
    write_groups(groups, os.path.join(config.output_dir, 'groups.csv'))
    _write_csv(diagnostics_frame(extraction, groups, conflicts),
               os.path.join(config.output_dir, 'diagnostics.csv'))
    print(f"Groups: {len(groups.classified())}, unclassified blocks: {len(groups.unclassified)}, "
          f"unpaired writes: {len(extraction.unpaired_writes)}")
    return 0


def _simulate_and_classify(config):
    """Run one workload per address set on a fresh cache and classify each trace."""
    address_sets = [s for s in config.workload.address_sets if s.addresses]
    if not address_sets:
        raise PipelineError("no events: the workload has no blocks")
    classified, unclassified = [], []
    events = 0
    for address_set in address_sets:
        cache = SlicedCache(config.geom, config.planted_hash, config.workload.policy)
        run = run_workload(cache, _workload_config(config, address_set.addresses))
        events += len(run.trace)
        _, groups, _ = _classify_trace(run.trace, address_set.addresses)
        classified.extend(members for _, members in groups.classified())
        unclassified.extend(groups.unclassified_blocks())
    if not events:
        raise PipelineError("no events: every block stayed resident, nothing was evicted")

    groups = BlockGroups.from_groups(classified, unclassified)
    problems = purity_problems(groups, config.geom, config.planted_hash)
    if problems:
        raise PipelineError(f"classification disagrees with the planted hash: {problems[0]}")
    return groups


def _crack(config):
    groups = _simulate_and_classify(config)
    result = crack_groups(groups, config.geom)
    result.equivalence = verify_recovered(
        result, config.planted_hash, config.geom,
        settings.SLICECRACK_DEFAULT_EQUIVALENCE_SAMPLE, config.seed,
    )
    return groups, result


def cmd_crack(config, args):
    print("Simulating and classifying...")
    groups, result = _crack(config)
    write_groups(groups, os.path.join(config.output_dir, 'groups.csv'))
    result.write(config.output_dir)
    print(f"Saved tables.csv, dedup.csv and formula.txt in {config.output_dir}")

    print(f"\nGroups: {len(groups.classified())}, unclassified blocks: {len(groups.unclassified)}")
    print(f"Distinct tables: {result.distinct_count}")
    if result.fit is not None and result.fit.exact:
        print("Formula:")
        print(result.fit.expression())
    else:
        print(f"Formula: {result.formula_text()}")
    if result.caveat:
        print(f"Note: {result.caveat}")
    print(result.equivalence.verdict())
    return 0 if result.equivalence.equivalent else 2


def _probe_pool(config):
    probe = config.probe
    if probe.pool_count:
        return a2_range_addresses(config.geom, probe.pool_set_index, probe.pool_a2_start, probe.pool_count)
    return list(config.workload.address_sets[0].addresses)


def cmd_probe(config, args):
    oracle = LatencyOracle(config.geom, config.latency, config.planted_hash, config.probe.threshold)
    pool = _probe_pool(config)
    print(f"Probing {len(pool)} blocks with {config.probe.repeats} repeats...")
    groups = crack_without_trace(oracle, pool, repeats=config.probe.repeats)
    write_groups(groups, os.path.join(config.output_dir, 'probe_groups.csv'))
    print(f"Groups: {len(groups.classified())}, unclassified blocks: {len(groups.unclassified)}, "
          f"probe calls: {oracle.calls}")
    problems = purity_problems(groups, config.geom, config.planted_hash)
    if problems:
        raise PipelineError(f"timing classification disagrees with the planted hash: {problems[0]}")
    return 0


def cmd_partition(config, args):
    scheme = ColorScheme.from_geometry(config.geom, config.partition.page_size)
    plan = plan_partition(config.partition.demands, scheme)
    write_plan(plan, os.path.join(config.output_dir, 'plan.csv'))
    print(f"Saved {os.path.join(config.output_dir, 'plan.csv')}")
    print(f"Colors: {scheme.color_count} (bits {list(scheme.color_bits)})")
    for client, colors in plan.items():
        span = f'{colors[0]}-{colors[-1]}' if colors else 'none'
        print(f"{client}: {len(colors)} colors ({span})")

    rng = np.random.default_rng(config.seed)
    sample = rng.integers(0, config.geom.address_limit, size=config.partition.sample_size, dtype=np.int64)
    result = verify_disjoint(plan, config.geom, config.planted_hash, sample, scheme)
    print(result.summary())
    return 0 if result.ok else 2


def _report_lines(config):
    geom = config.geom
    lines = ['--- Geometry ---',
             f'line size: {geom.line_size_bytes}B, associativity: {geom.associativity}, '
             f'sets per slice: {geom.sets_per_slice}, slices: {geom.slice_count}',
             f'address bits: {geom.addr_width_bits}, memory: {geom.memory_bytes >> 20}MB',
             f'blocks: {geom.block_count}, blocks per set index: {geom.blocks_per_set_index}',
             f'LLC capacity: {geom.capacity_bytes >> 10}kB']

    deterministic = LatencyModel(config.latency.l_llc, config.latency.l_memory)
    scan = stride_scan(analytic_stride_oracle(geom, deterministic), config.stride_scan.strides,
                       max_blocks=config.stride_scan.max_blocks)
    lines += ['', '--- Stride scan ---', scan.knees.to_string(index=False)]

    lines += ['', '--- Crack ---']
    try:
        groups, result = _crack(config)
        lines.append(f'groups: {len(groups.classified())}, distinct tables: {result.distinct_count}')
        lines.append(result.formula_text())
        lines.append(result.equivalence.verdict())
        if result.caveat:
            lines.append(f'note: {result.caveat}')
    except PipelineError as exc:
        lines.append(f'crack failed: {exc}')

    lines += ['', '--- Four-slice formula vs reference table ---']
    lines += [f'{name} = {text}' for name, text in FOUR_CORE_EXPRESSIONS.items()]
    lines.append(consistency_report().head(8).to_string(index=False))

    lines += ['', '--- Two-thread knees ---']
    oracle = LatencyOracle(geom, deterministic, config.planted_hash)
    first_block = config.workload.all_addresses[0] if config.workload.all_addresses else 0
    a2_start = split_address(first_block, geom).a2
    m_range = range(1, geom.associativity + 2)
    rows = []
    for k in range(5):
        for same_set in (True, False):
            try:
                knee = two_thread_experiment(oracle, k, m_range, same_set, a2_start=a2_start).knee
            except ArgumentError as exc:
                logger.info("two-thread experiment skipped: %s", exc)
                knee = None
            rows.append((k, 'same' if same_set else 'different', knee))
    lines.append(pd.DataFrame(rows, columns=['k', 'sets', 'knee']).to_string(index=False))
    return lines


def cmd_report(config, args):
    print("Building report...")
    lines = _report_lines(config)
    path = os.path.join(config.output_dir, 'report.txt')
    with open(path, 'w') as handle:
        handle.write('\n'.join(lines) + '\n')
    print("\n".join(lines))
    print(f"\nSaved {path}")
    return 0


COMMANDS = {
    'stride-scan': cmd_stride_scan,
    'gen-trace': cmd_gen_trace,
    'classify': cmd_classify,
    'crack': cmd_crack,
    'probe': cmd_probe,
    'partition': cmd_partition,
    'report': cmd_report,
}


def main(argv=None):
    """Main function."""
    args = parse_arguments(argv)
    level = settings.LOG_LEVEL if not args.verbose else ('INFO' if args.verbose == 1 else 'DEBUG')
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')

    try:
        config = load_config(args.config, seed=args.seed, noise=args.noise, output_dir=args.out)
        os.makedirs(config.output_dir, exist_ok=True)
        return COMMANDS[args.command](config, args)
    except USAGE_ERRORS as e:
        print(f"Error: {e}")
        return 1
    except PIPELINE_ERRORS as e:
        print(f"Error: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
