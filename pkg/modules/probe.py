"""
Timing-only cracking.

Everything here sees the cache through a latency oracle: a list of blocks
goes in, an average access latency comes out. In desk mode the oracle
computes that latency from the planted hash and the occupancy model; a
measurement adapter can stand in for real hardware.
"""

import copy
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

import settings
from core_model import block_address, deterministic_latency, location_of
from errors import ArgumentError, InsufficientPoolError, UnmappedAddressError
from eviction_graph import BlockGroups
from simulator import ReplacementPolicy, SlicedCache, WorkloadConfig, run_workload

logger = logging.getLogger(__name__)


class MeasurementAdapter:
    """Backend that times a list of addresses; subclass for hardware."""

    def measure(self, addresses, repeats):
        raise NotImplementedError


class LatencyOracle:
    """
    Latency oracle over one cache geometry.

    Parameters:
    -----------
    geom : CacheGeometry
    model : LatencyModel
    planted_hash : SliceHash, optional
        Ground truth for desk mode
    threshold : float, optional
        Cutoff for an (N+1)-block conflict, default midway up the first
        post-knee step
    adapter : MeasurementAdapter, optional
        Used instead of the planted hash when given
    """

    def __init__(self, geom, model, planted_hash=None, threshold=None, adapter=None):
        if planted_hash is None and adapter is None:
            raise ArgumentError("oracle needs a planted hash or a measurement adapter")
        self.geom = geom
        self.model = model
        self.planted_hash = planted_hash
        self.adapter = adapter

        step = model.l_memory / geom.associativity
        if threshold is None:
            threshold = model.l_llc + 0.5 * step
        if not model.l_llc < threshold < model.l_llc + step:
            raise ArgumentError(
                f"threshold {threshold} must lie strictly between {model.l_llc} "
                f"and {model.l_llc + step}"
            )
        self.threshold = threshold
        self.calls = 0
        self._rng = np.random.default_rng(model.rng_seed)

    def clone(self):
        """Independent copy with its own call counter and noise stream state."""
        twin = copy.copy(self)
        twin._rng = copy.deepcopy(self._rng)
        twin.calls = 0
        return twin

    def measure(self, blocks, repeats=1, background=()):
        """
        Median over ``repeats`` of the average latency of ``blocks``.

        ``background`` blocks occupy the cache (another thread's working
        set) but are not part of the average.
        """
        blocks = list(blocks)
        if not blocks:
            raise ArgumentError("nothing to measure")
        if repeats < 1:
            raise ArgumentError(f"repeats must be positive, got {repeats}")
        for address in blocks:
            if address % self.geom.line_size_bytes:
                raise ArgumentError(f"address {address:#x} is not line-aligned")
        self.calls += 1

        if self.adapter is not None:
            return float(self.adapter.measure(blocks + list(background), repeats))

        where = [location_of(a, self.geom, self.planted_hash) for a in blocks]
        occupancy = Counter(where)
        occupancy.update(location_of(a, self.geom, self.planted_hash) for a in background)
        per_block = np.array([
            deterministic_latency(occupancy[bucket], self.geom.associativity, self.model)
            for bucket in where
        ])
        value = float(per_block.mean())
        if self.model.noise_stddev == 0:
            return value
        samples = self._rng.normal(0.0, self.model.noise_stddev, size=(repeats, len(blocks)))
        return float(np.median(value + samples.mean(axis=1)))

    def conflicts(self, blocks, repeats=settings.SLICECRACK_DEFAULT_PROBE_REPEATS):
        """
        Whether some cache set holds more than N of ``blocks``.

        The cutoff and the repeat count scale with the group size, since the
        weakest conflict (N+1 blocks in one set) is diluted by the rest.
        """
        group = self.geom.associativity + 1
        size = len(blocks)
        cutoff = self.model.l_llc + (self.threshold - self.model.l_llc) * group / size
        scaled_repeats = repeats * max(1, math.ceil(size / group))
        return self.measure(blocks, scaled_repeats) > cutoff


def _seed_eviction_set(oracle, pool, repeats):
    """Minimal conflicting subset (N+1 blocks in one set) of ``pool``, or None."""
    group = oracle.geom.associativity + 1
    if len(pool) < group:
        return None
    size = group
    while not oracle.conflicts(pool[:size], repeats):
        if size >= len(pool):
            return None
        size = min(2 * size, len(pool))

    candidate = list(pool[:size])
    for block in list(candidate):
        if len(candidate) == group:
            break
        trial = [b for b in candidate if b != block]
        if oracle.conflicts(trial, repeats):
            candidate = trial
    return candidate


def crack_without_trace(oracle, pool, associativity=None,
                        repeats=settings.SLICECRACK_DEFAULT_PROBE_REPEATS):
    """
    Classify a pool of blocks sharing one set index by timing alone.

    An eviction set of N+1 blocks is seeded from the pool, then every other
    block is tested with N members of that set: a conflict means it maps to
    the same slice. The loop repeats on what is left.

    Returns:
    --------
    BlockGroups
        leftover blocks that never joined a group are unclassified
    """
    if associativity is not None and associativity != oracle.geom.associativity:
        raise ArgumentError(
            f"associativity {associativity} does not match the oracle geometry "
            f"({oracle.geom.associativity})"
        )
    n_ways = oracle.geom.associativity
    remaining = list(dict.fromkeys(pool))
    groups = []
    start_calls = oracle.calls

    while remaining:
        seed = _seed_eviction_set(oracle, remaining, repeats)
        if seed is None:
            break
        core = seed[:n_ways]
        members = list(seed)
        for block in remaining:
            if block in members:
                continue
            if oracle.conflicts(core + [block], repeats):
                members.append(block)
        groups.append(members)
        joined = set(members)
        remaining = [b for b in remaining if b not in joined]
        logger.debug("group of %d blocks, %d left", len(members), len(remaining))

    if not groups:
        raise InsufficientPoolError(
            f"no {n_ways + 1} of the {len(pool)} pool blocks conflict; the pool is too small"
        )
    logger.info("timing crack: %d groups, %d unclassified, %d probe calls",
                len(groups), len(remaining), oracle.calls - start_calls)
    return BlockGroups.from_groups(groups, remaining)


def same_bucket_blocks(geom, slice_hash, slice_id, set_index, count, a2_start=0):
    """The first ``count`` blocks at or above ``a2_start`` in one (slice, set)."""
    found = []
    a2 = a2_start
    limit = 1 << geom.a2_bits
    while len(found) < count and a2 < limit:
        address = block_address(a2, set_index, geom)
        try:
            if location_of(address, geom, slice_hash)[0] == slice_id:
                found.append(address)
        except UnmappedAddressError:
            break
        a2 += 1
    if len(found) < count:
        raise ArgumentError(
            f"only {len(found)} blocks map to slice {slice_id}, set {set_index}"
        )
    return found


@dataclass
class TwoThreadResult:
    k: int
    same_set: bool
    knee: Optional[int]
    curve: pd.DataFrame


def two_thread_experiment(oracle, k, m_range, same_set, slice_id=0, set_index=0, a2_start=0):
    """
    Knee of thread 2 while thread 1 keeps ``k`` blocks resident.

    Thread 1's blocks share thread 2's cache set when ``same_set`` is set,
    otherwise they sit in the next set index.
    """
    n_ways = oracle.geom.associativity
    if not 0 <= k < n_ways:
        raise ArgumentError(f"k must lie in 0..{n_ways - 1}, got {k}")
    m_values = sorted(set(int(m) for m in m_range))
    if not m_values or m_values[0] < 1:
        raise ArgumentError("m_range must hold positive block counts")

    geom, planted = oracle.geom, oracle.planted_hash
    if same_set:
        pool = same_bucket_blocks(geom, planted, slice_id, set_index, k + m_values[-1], a2_start)
        pinned, chased = pool[:k], pool[k:]
    else:
        other = (set_index + 1) % geom.sets_per_slice
        if other == set_index:
            raise ArgumentError("a different set needs more than one set index")
        pinned = same_bucket_blocks(geom, planted, slice_id, other, k, a2_start) if k else []
        chased = same_bucket_blocks(geom, planted, slice_id, set_index, m_values[-1], a2_start)

    rows = []
    for m in m_values:
        rows.append((m, oracle.measure(chased[:m], background=pinned)))
    curve = pd.DataFrame(rows, columns=['m', 'latency'])
    above = curve[curve['latency'] > oracle.threshold]
    knee = int(above['m'].iloc[0]) if len(above) else None

    if same_set and k and knee is not None and knee != settings.PUBLISHED_TWO_THREAD_KNEE:
        logger.warning(
            "two-thread knee at %d for k=%d; the published hardware figure reports %d",
            knee, k, settings.PUBLISHED_TWO_THREAD_KNEE,
        )
    return TwoThreadResult(k, same_set, knee, curve)


def pollute_sweep(geom, planted_hash, model, n_max, policy=ReplacementPolicy.DIRTY_RETAIN,
                  dirty_writes=True, laps=settings.SLICECRACK_DEFAULT_LAPS, seed=0, a2_start=0):
    """
    Simulated single-thread latency curve for 1..n_max blocks in one set.

    Latency is taken from steady-state hit and miss counts: hits cost
    L_LLC, misses L_memory.
    """
    pool = same_bucket_blocks(geom, planted_hash, 0, 0, n_max, a2_start)
    rows = []
    for n in range(1, n_max + 1):
        cache = SlicedCache(geom, planted_hash, policy)
        config = WorkloadConfig.for_laps(pool[:n], laps, shuffle_seed=seed, dirty_writes=dirty_writes)
        stats = run_workload(cache, config).stats
        miss_rate = stats.steady_miss_rate
        rows.append((n, miss_rate, model.l_llc * (1 - miss_rate) + model.l_memory * miss_rate))
    return pd.DataFrame(rows, columns=['n', 'miss_rate', 'latency'])

