"""
Sliced set-associative cache simulator and pointer-chase workload.

The workload mirrors the test program: the array is initialised so that
each block holds the address of the next one, and the main loop keeps
doing ``addr = *(TYPE*)(addr)``, optionally dirtying the line after each
load. Misses are reported the way a memory-controller trace would show
them: a read for every fill and a write for every dirty eviction.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

import settings
from core_model import block_address, slice_of, split_address
from errors import ArgumentError, TraceParseError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['Seq', 'ReadOrWrite', 'PhysicalAddress', 'Interval']


class ReplacementPolicy(str, Enum):
    # Victim is the least recently used line; fills go to the MRU position
    LRU_MRU_INSERT = 'lru'
    # Clean lines go first; with every line dirty, the newest fill goes
    DIRTY_RETAIN = 'dirty_retain'


@dataclass
class CacheLine:
    address: int
    dirty: bool
    filled_at: int


class Eviction(NamedTuple):
    address: int
    was_dirty: bool


class AccessResult(NamedTuple):
    hit: bool
    evicted: Optional[Eviction] = None


class EvictionRecord(NamedTuple):
    clock: int
    filled: int
    victim: int
    was_dirty: bool


class SlicedCache:
    """
    Sliced LLC holding one recency-ordered way list per (slice, set).

    Parameters:
    -----------
    geom : CacheGeometry
        Cache geometry
    slice_hash : SliceHash
        Ground-truth slice function
    policy : ReplacementPolicy
        Replacement policy
    """

    def __init__(self, geom, slice_hash, policy=ReplacementPolicy.LRU_MRU_INSERT):
        slice_hash.validate(geom)
        self.geom = geom
        self.slice_hash = slice_hash
        self.policy = ReplacementPolicy(policy)

        # (slice, set) -> lines ordered LRU first, MRU last
        self._sets = {}
        self._location = {}
        self.eviction_log: List[EvictionRecord] = []

        self.clock = 0
        self.hits = 0
        self.misses = 0
        self.write_backs = 0

    def locate(self, address):
        """(slice, set) bucket of a line-aligned address."""
        where = self._location.get(address)
        if where is None:
            if address % self.geom.line_size_bytes:
                raise ArgumentError(f"address {address:#x} is not line-aligned")
            fields = split_address(address, self.geom)
            where = (slice_of(address, self.geom, self.slice_hash), fields.a1)
            self._location[address] = where
        return where

    def access(self, address, is_write=False):
        """
        Access one line-aligned address.

        Returns:
        --------
        AccessResult
            hit flag and, on a miss that needed room, the evicted line
        """
        bucket = self.locate(address)
        lines = self._sets.setdefault(bucket, [])
        self.clock += 1

        for position, line in enumerate(lines):
            if line.address == address:
                lines.append(lines.pop(position))
                line.dirty = line.dirty or is_write
                self.hits += 1
                return AccessResult(True)

        self.misses += 1
        evicted = None
        if len(lines) >= self.geom.associativity:
            victim = lines.pop(self._victim_position(lines))
            evicted = Eviction(victim.address, victim.dirty)
            if victim.dirty:
                self.write_backs += 1
            self.eviction_log.append(
                EvictionRecord(self.clock, address, victim.address, victim.dirty)
            )
        lines.append(CacheLine(address, is_write, self.clock))
        return AccessResult(False, evicted)

    def _victim_position(self, lines):
        if self.policy is ReplacementPolicy.LRU_MRU_INSERT:
            return 0
        for position, line in enumerate(lines):
            if not line.dirty:
                return position
        newest = max(range(len(lines)), key=lambda p: lines[p].filled_at)
        return newest

    def is_resident(self, address):
        lines = self._sets.get(self.locate(address), ())
        return any(line.address == address for line in lines)

    def occupancy(self, slice_id, set_index):
        return len(self._sets.get((slice_id, set_index), ()))

    def recency_order(self, slice_id, set_index):
        """Resident addresses from least to most recently used."""
        return [line.address for line in self._sets.get((slice_id, set_index), ())]

    def check_invariants(self):
        """Raise AssertionError if the cache state is inconsistent."""
        for bucket, lines in self._sets.items():
            assert len(lines) <= self.geom.associativity, f'bucket {bucket} over capacity'
            addresses = [line.address for line in lines]
            assert len(set(addresses)) == len(addresses), f'bucket {bucket} holds duplicates'
            for address in addresses:
                assert self.locate(address) == bucket, f'{address:#x} sits in the wrong set'


# -- workload ---------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadConfig:
    """
    One pointer-chase run.

    Parameters:
    -----------
    block_addresses : tuple
        One line-aligned physical address per block
    shuffle_seed : int
        Seed for the chain order
    iterations : int
        Number of dependent loads
    dirty_writes : bool
        Dirty every line after loading it ("pollute")
    idle_gap : int
        Idle ticks inserted between accesses; 0 lets write-backs drift
    trace_warmup : bool
        Also record trace events during the first lap
    reshuffle_laps : bool
        Re-initialise the chain with a fresh order at every lap boundary
    """
    block_addresses: tuple
    shuffle_seed: int
    iterations: int
    dirty_writes: bool = False
    idle_gap: int = settings.SLICECRACK_DEFAULT_IDLE_GAP
    trace_warmup: bool = False
    reshuffle_laps: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'block_addresses', tuple(int(a) for a in self.block_addresses))
        if self.iterations < 1:
            raise ArgumentError(f"iterations must be positive, got {self.iterations}")
        if self.idle_gap < 0:
            raise ArgumentError(f"idle gap must be non-negative, got {self.idle_gap}")

    @classmethod
    def for_laps(cls, block_addresses, laps, shuffle_seed=0, **kwargs):
        """Config that runs ``laps`` full passes over the chain."""
        block_addresses = tuple(block_addresses)
        return cls(block_addresses, shuffle_seed, max(1, laps * len(block_addresses)), **kwargs)


def build_chain(config):
    """
    Order in which the pointer chase visits the blocks.

    The returned list is one lap of a single cycle: the last block points
    back to the first.
    """
    addresses = list(config.block_addresses)
    if not addresses:
        raise ArgumentError("workload has no block addresses")
    if len(set(addresses)) != len(addresses):
        raise ArgumentError("workload block addresses must be distinct")
    rng = np.random.default_rng(config.shuffle_seed)
    return [addresses[i] for i in rng.permutation(len(addresses))]


def chain_pointers(order):
    """Array initialisation: each block stores the address of the next one."""
    return {address: order[(i + 1) % len(order)] for i, address in enumerate(order)}


def stride_addresses(base, stride, count):
    return [base + i * stride for i in range(count)]


def bit_combination_addresses(base, bits):
    """Every combination of the given bit positions set on top of ``base``."""
    addresses = []
    for value in range(1 << len(bits)):
        address = base
        for j, bit in enumerate(bits):
            if (value >> j) & 1:
                address |= 1 << bit
        addresses.append(address)
    return addresses


def a2_range_addresses(geom, set_index, a2_start, count):
    """Blocks sharing one set index with consecutive A2 values."""
    return [block_address(a2, set_index, geom) for a2 in range(a2_start, a2_start + count)]


# -- trace ------------------------------------------------------------------

class TraceEvent(NamedTuple):
    seq: int
    op: str
    address: int
    interval: int


class MemoryTrace:
    """Ordered list of memory-controller events."""

    def __init__(self, events=()):
        self.events = list(events)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, index):
        return self.events[index]

    def __eq__(self, other):
        return isinstance(other, MemoryTrace) and self.events == other.events

    def __repr__(self):
        return f'MemoryTrace({len(self.events)} events)'

    def to_frame(self):
        """DataFrame with columns seq, op, address, interval."""
        return pd.DataFrame(self.events, columns=list(TraceEvent._fields)).astype(
            {'seq': 'int64', 'address': 'int64', 'interval': 'int64'}
        )


def write_trace(trace, destination):
    """Write a trace as CSV: Seq, ReadOrWrite, PhysicalAddress (hex), Interval."""
    frame = pd.DataFrame({
        'Seq': [e.seq for e in trace],
        'ReadOrWrite': [e.op for e in trace],
        'PhysicalAddress': [f'{e.address:x}' for e in trace],
        'Interval': [e.interval for e in trace],
    }, columns=TRACE_COLUMNS)
    frame.to_csv(destination, index=False, lineterminator='\n')


def read_trace(source):
    """
    Parse a trace CSV written by ``write_trace`` (or collected elsewhere).

    Raises:
    -------
    TraceParseError
        With the 1-based data row number of the first malformed row
        (row 0 is the header)
    """
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return MemoryTrace()
    except pd.errors.ParserError as exc:
        raise TraceParseError(_parser_error_row(str(exc)), str(exc)) from None

    if list(frame.columns) != TRACE_COLUMNS:
        raise TraceParseError(0, f"expected columns {TRACE_COLUMNS}, got {list(frame.columns)}")
    frame = frame.fillna('')

    seq = pd.to_numeric(frame['Seq'], errors='coerce')
    interval = pd.to_numeric(frame['Interval'], errors='coerce')
    checks = [
        (~frame['Seq'].str.fullmatch(r'\d+') | seq.isna(), "Seq is not a non-negative integer"),
        (~frame['ReadOrWrite'].isin(['read', 'write']), "ReadOrWrite must be 'read' or 'write'"),
        (~frame['PhysicalAddress'].str.fullmatch(r'[0-9a-f]+'), "PhysicalAddress is not lowercase hex"),
        (~frame['Interval'].str.fullmatch(r'\d+') | interval.isna(), "Interval is not a non-negative integer"),
    ]
    for bad, message in checks:
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise TraceParseError(row, f"{message}: {frame.iloc[row - 1].tolist()}")

    seq_values = seq.astype('int64').to_numpy()
    if len(seq_values) > 1:
        not_increasing = np.flatnonzero(np.diff(seq_values) <= 0)
        if len(not_increasing):
            row = int(not_increasing[0]) + 2
            raise TraceParseError(row, f"Seq {seq_values[row - 1]} does not increase")

    events = [
        TraceEvent(int(s), op, int(address, 16), int(gap))
        for s, op, address, gap in zip(
            seq_values, frame['ReadOrWrite'], frame['PhysicalAddress'], interval.astype('int64')
        )
    ]
    return MemoryTrace(events)


def _parser_error_row(message):
    # pandas reports "Expected 4 fields in line 7, saw 5"; line 1 is the header
    marker = 'line '
    if marker in message:
        digits = message.split(marker, 1)[1].split(',')[0].split()[0]
        if digits.isdigit():
            return int(digits) - 1
    return 0


# -- running workloads ------------------------------------------------------

@dataclass
class WorkloadStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    write_backs: int = 0
    steady_accesses: int = 0
    steady_hits: int = 0
    steady_misses: int = 0

    @property
    def fills(self):
        return self.misses

    @property
    def steady_miss_rate(self):
        if not self.steady_accesses:
            return 0.0
        return self.steady_misses / self.steady_accesses


@dataclass
class WorkloadRun:
    trace: MemoryTrace
    stats: WorkloadStats
    order: list = field(default_factory=list)


class _PointerChase:
    """One thread of dependent loads over a chain."""

    def __init__(self, cache, config):
        self.config = config
        self.order = build_chain(config)
        for address in self.order:
            cache.locate(address)
        self.current = list(self.order)
        self.pointers = chain_pointers(self.current)
        self.address = self.order[0]
        self.lap = len(self.order)
        self.step_count = 0
        self.stats = WorkloadStats()

    @property
    def remaining(self):
        return self.config.iterations - self.step_count

    def step(self, cache):
        """Access the current block and follow its pointer."""
        address = self.address
        warm = self.step_count < self.lap
        result = cache.access(address, is_write=self.config.dirty_writes)
        self.stats.accesses += 1
        self.stats.hits += result.hit
        self.stats.misses += not result.hit
        if result.evicted is not None and result.evicted.was_dirty:
            self.stats.write_backs += 1
        if not warm:
            self.stats.steady_accesses += 1
            self.stats.steady_hits += result.hit
            self.stats.steady_misses += not result.hit

        self.step_count += 1
        if self.config.reshuffle_laps and self.step_count % self.lap == 0:
            self._reinitialise(self.step_count // self.lap)
        else:
            self.address = self.pointers[address]
        return address, result, warm

    def _reinitialise(self, lap_index):
        # under strict LRU a fixed cycle only links blocks that sit N apart
        # in their set, so a set of m blocks splits into gcd(N, m) components
        rng = np.random.default_rng([self.config.shuffle_seed, lap_index])
        self.current = [self.current[i] for i in rng.permutation(len(self.current))]
        self.pointers = chain_pointers(self.current)
        self.address = self.current[0]


def run_workloads(cache, configs):
    """
    Run several pointer chases on one cache, one access each in turn.

    Returns:
    --------
    tuple
        (MemoryTrace shared by all chases, list of WorkloadRun per config)
    """
    chases = [_PointerChase(cache, config) for config in configs]
    events = []
    buffered_write = None

    def emit(op, address, interval):
        events.append(TraceEvent(len(events) + 1, op, address, interval))

    while any(chase.remaining > 0 for chase in chases):
        for chase in chases:
            if chase.remaining <= 0:
                continue
            address, result, warm = chase.step(cache)
            if result.hit or (warm and not chase.config.trace_warmup):
                continue

            emit('read', address, settings.READ_FILL_TICKS)
            if buffered_write is not None:
                emit('write', *buffered_write)
                buffered_write = None
            if result.evicted is not None and result.evicted.was_dirty:
                gap = chase.config.idle_gap
                write = (result.evicted.address, settings.WRITE_BACK_TICKS + gap)
                if gap > 0:
                    emit('write', *write)
                else:
                    # no idle loop: the write-back drains after the next fill
                    buffered_write = write

    if buffered_write is not None:
        emit('write', *buffered_write)

    trace = MemoryTrace(events)
    runs = [WorkloadRun(trace, chase.stats, chase.order) for chase in chases]
    for chase in chases:
        logger.info(
            "workload of %d blocks: %d accesses, %d misses, %d write-backs",
            chase.lap, chase.stats.accesses, chase.stats.misses, chase.stats.write_backs,
        )
    return trace, runs


def run_workload(cache, config):
    """Run one pointer chase and return its trace and statistics."""
    trace, runs = run_workloads(cache, [config])
    return runs[0]
