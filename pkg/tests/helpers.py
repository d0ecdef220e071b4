"""Shared building blocks for the test modules."""

import os

from core_model import block_address
from eviction_graph import BlockGroups, connected_components, extract_edges
from simulator import SlicedCache, WorkloadConfig, run_workload
from solver import MappingTable, canonical_labels

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')


def classify_workload(geom, planted, addresses, laps=3, seed=0, **kwargs):
    """Simulate a dirty pointer chase and classify its trace."""
    cache = SlicedCache(geom, planted)
    config = WorkloadConfig.for_laps(addresses, laps, shuffle_seed=seed, dirty_writes=True, **kwargs)
    run = run_workload(cache, config)
    return connected_components(extract_edges(run.trace).edges, addresses)


def planted_table(planted, geom, set_index, a2_values):
    """Canonically labeled table straight from a planted hash."""
    entries = {a2: planted.slice_for(a2, set_index, geom) for a2 in a2_values}
    return MappingTable(set_index, canonical_labels(entries))


def blocks_at(geom, set_index, a2_values):
    return [block_address(a2, set_index, geom) for a2 in a2_values]


def planted_groups(planted, geom, set_indexes, a2_values):
    """Exact slice groups of the given blocks, as a perfect classifier would find them."""
    buckets = {}
    for set_index in set_indexes:
        for a2 in a2_values:
            key = (planted.slice_for(a2, set_index, geom), set_index)
            buckets.setdefault(key, []).append(block_address(a2, set_index, geom))
    return BlockGroups.from_groups(buckets.values())
