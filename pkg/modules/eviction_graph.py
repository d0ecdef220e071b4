"""
Eviction relationships, the block graph and slice-group classification.

A write-back that sits right next to a read fill in the trace means the
written block was evicted to make room for the read one, so both live in
the same (slice, set). Taking connected components of those relationships
classifies blocks into groups.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, NamedTuple, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components

import settings
from core_model import location_of
from errors import ArgumentError

logger = logging.getLogger(__name__)


class EvictionEdge(NamedTuple):
    filled: int
    evicted: int
    seq_of_read: int


class UnpairedWrite(NamedTuple):
    seq: int
    address: int
    reason: str


@dataclass
class EdgeExtraction:
    edges: List[EvictionEdge]
    unpaired_writes: List[UnpairedWrite]

    def __iter__(self):
        return iter(self.edges)

    def __len__(self):
        return len(self.edges)


def extract_edges(trace, max_pair_gap=settings.SLICECRACK_DEFAULT_PAIR_GAP):
    """
    Pair every write-back with the read fill that caused it.

    A write pairs with the nearest unconsumed read at most ``max_pair_gap``
    events before it, or failing that, after it. Each read pairs at most
    once since a fill evicts at most one line.

    Returns:
    --------
    EdgeExtraction
        edges plus the writes that found no partner
    """
    if max_pair_gap < 1:
        raise ArgumentError(f"max_pair_gap must be at least 1, got {max_pair_gap}")
    events = list(trace)
    consumed = set()
    edges = []
    unpaired = []

    for i, event in enumerate(events):
        if event.op != 'write':
            continue
        partner = None
        window = list(range(i - 1, max(-1, i - max_pair_gap - 1), -1))
        window += list(range(i + 1, min(len(events), i + max_pair_gap + 1)))
        for j in window:
            candidate = events[j]
            if candidate.op == 'read' and j not in consumed and candidate.address != event.address:
                partner = j
                break
        if partner is None:
            unpaired.append(UnpairedWrite(event.seq, event.address, 'no read within pair gap'))
            continue
        consumed.add(partner)
        read = events[partner]
        edges.append(EvictionEdge(read.address, event.address, read.seq))

    if unpaired:
        logger.warning("%d of %d write events could not be paired", len(unpaired),
                       len(unpaired) + len(edges))
    logger.info("extracted %d eviction edges", len(edges))
    return EdgeExtraction(edges, unpaired)


@dataclass
class BlockGroups:
    """
    Disjoint groups of block addresses.

    Group ids follow ascending smallest member address. Singleton groups
    of blocks never seen in an eviction are listed in ``unclassified``.
    """
    groups: List[Tuple[int, ...]]
    labeling: Dict[int, int] = field(default_factory=dict)
    unclassified: FrozenSet[int] = frozenset()

    @classmethod
    def from_groups(cls, groups, unclassified_blocks=()):
        """Canonically label ``groups`` plus one singleton per unclassified block."""
        members = [tuple(sorted(set(g))) for g in groups if g]
        members += [(block,) for block in sorted(set(unclassified_blocks))]
        members.sort(key=lambda g: g[0])
        labeling = {}
        for group_id, group in enumerate(members):
            for address in group:
                if address in labeling:
                    raise ArgumentError(f"block {address:#x} appears in two groups")
                labeling[address] = group_id
        singles = set(unclassified_blocks)
        unclassified = frozenset(
            group_id for group_id, group in enumerate(members)
            if len(group) == 1 and group[0] in singles
        )
        return cls(members, labeling, unclassified)

    def __len__(self):
        return len(self.groups)

    def group_of(self, address):
        return self.labeling[address]

    def classified(self):
        """(group_id, members) of every classified group."""
        return [(gid, group) for gid, group in enumerate(self.groups) if gid not in self.unclassified]

    def unclassified_blocks(self):
        return sorted(self.groups[gid][0] for gid in self.unclassified)

    def partition(self):
        """Classified groups as a set of frozensets, ignoring labels."""
        return {frozenset(group) for _, group in self.classified()}

    def same_partition(self, other):
        return self.partition() == other.partition()

    def sizes(self):
        return sorted(len(group) for _, group in self.classified())

    def to_frame(self):
        rows = [
            (gid, f'{address:x}')
            for gid, group in self.classified()
            for address in group
        ]
        return pd.DataFrame(rows, columns=['group_id', 'address_hex'])


def _component_labels(pairs, extra_nodes=()):
    """Node -> component label over undirected ``pairs``."""
    nodes = sorted(set(extra_nodes) | {a for pair in pairs for a in pair})
    if not nodes:
        return {}
    index = {address: i for i, address in enumerate(nodes)}
    rows = np.array([index[a] for a, _ in pairs], dtype=np.int64)
    cols = np.array([index[b] for _, b in pairs], dtype=np.int64)
    graph = coo_matrix(
        (np.ones(len(pairs), dtype=np.int8), (rows, cols)), shape=(len(nodes), len(nodes))
    ).tocsr()
    _, labels = _csgraph_components(graph, directed=False)
    return dict(zip(nodes, labels.tolist()))


def connected_components(edges, all_nodes=()):
    """
    Classify blocks by connectivity in the (undirected) eviction graph.

    Parameters:
    -----------
    edges : iterable of EvictionEdge or (a, b) pairs
    all_nodes : iterable
        Blocks that took part; those without edges become unclassified

    Returns:
    --------
    BlockGroups
    """
    pairs = [(int(e[0]), int(e[1])) for e in edges]
    labels = _component_labels(pairs, all_nodes)
    if not labels:
        return BlockGroups([], {}, frozenset())

    touched = {a for pair in pairs for a in pair}
    members = {}
    for address, label in labels.items():
        members.setdefault(label, []).append(address)

    groups = [m for _, m in sorted(members.items()) if len(m) > 1 or m[0] in touched]
    isolated = [m[0] for _, m in sorted(members.items()) if len(m) == 1 and m[0] not in touched]
    result = BlockGroups.from_groups(groups, isolated)
    logger.info("%d groups, %d unclassified blocks", len(groups), len(isolated))
    return result


class ConflictEdge(NamedTuple):
    a: int
    b: int
    support: int


def edge_support(edges):
    """Occurrences of every undirected edge."""
    return Counter(tuple(sorted((int(e[0]), int(e[1])))) for e in edges)


def find_conflict_edges(edges, ratio=settings.SLICECRACK_CONFLICT_SUPPORT_RATIO, min_side=2):
    """
    Weak single links between two otherwise separate groups.

    An edge is reported when it is the only connection between two sides
    of at least ``min_side`` blocks each, and its support is at most
    1/``ratio`` of the median support of the other edges at both of its
    ends. Pairing mistakes look like that; in a clean trace every edge is
    about as frequent as its neighbours.
    """
    support = edge_support(edges)
    incident = {}
    for pair, seen in support.items():
        for node in pair:
            incident.setdefault(node, []).append((pair, seen))

    def neighbour_support(node, pair):
        others = [seen for other, seen in incident[node] if other != pair]
        return float(np.median(others)) if others else 0.0

    conflicts = []
    for pair, seen in sorted(support.items()):
        a, b = pair
        if seen * ratio > min(neighbour_support(a, pair), neighbour_support(b, pair)):
            continue
        labels = _component_labels([p for p in support if p != pair], pair)
        if labels[a] == labels[b]:
            continue
        sides = Counter(labels.values())
        if min(sides[labels[a]], sides[labels[b]]) >= min_side:
            conflicts.append(ConflictEdge(a, b, seen))
    if conflicts:
        logger.warning("%d conflict edges: weak links between otherwise separate groups",
                       len(conflicts))
    return conflicts


@dataclass
class AccessHistogram:
    counts: pd.Series
    coefficient_of_variation: float


def access_histogram(trace, window=None, blocks=None):
    """
    Read fills per block over a seq window.

    Parameters:
    -----------
    trace : MemoryTrace
    window : tuple, optional
        Inclusive (first_seq, last_seq); the whole trace by default
    blocks : iterable, optional
        Blocks to report even when they were never filled in the window

    Returns:
    --------
    AccessHistogram
        counts indexed by address, and the population coefficient of
        variation of those counts (0 means uniform)
    """
    frame = trace.to_frame()
    if window is not None:
        first, last = window
        if first > last:
            raise ArgumentError(f"empty window {window}")
        frame = frame[(frame['seq'] >= first) & (frame['seq'] <= last)]
    if frame.empty:
        raise ArgumentError(f"no events in window {window}")

    counts = frame.loc[frame['op'] == 'read', 'address'].value_counts().sort_index()
    if blocks is not None:
        counts = counts.reindex(sorted(set(blocks)), fill_value=0)
    counts = counts.astype('int64')
    counts.name = 'fills'

    mean = counts.mean() if len(counts) else 0.0
    cv = float(counts.std(ddof=0) / mean) if mean else 0.0
    return AccessHistogram(counts, cv)


def write_groups(groups, destination):
    groups.to_frame().to_csv(destination, index=False, lineterminator='\n')


def read_groups(source):
    frame = pd.read_csv(source, dtype=str)
    grouped = {}
    for group_id, address in zip(frame['group_id'].astype(int), frame['address_hex']):
        grouped.setdefault(group_id, []).append(int(address, 16))
    return BlockGroups.from_groups(grouped.values())


def diagnostics_frame(extraction, groups, conflicts=()):
    """Unpaired writes, unclassified blocks and conflict edges as one table."""
    rows = [('unpaired_write', f'{w.address:x}', f'seq {w.seq}: {w.reason}')
            for w in extraction.unpaired_writes]
    rows += [('unclassified', f'{a:x}', 'no eviction observed') for a in groups.unclassified_blocks()]
    rows += [('conflict_edge', f'{c.a:x}', f'{c.b:x} seen {c.support}x') for c in conflicts]
    return pd.DataFrame(rows, columns=['kind', 'address_hex', 'detail'])


def purity_problems(groups, geom, slice_hash):
    """
    Disagreements between classified groups and a ground-truth hash.

    A group must sit in one (slice, set) and the classified blocks of one
    (slice, set) must form one group. Returns human-readable problems.
    """
    problems = []
    group_of_bucket = {}
    for group_id, members in groups.classified():
        buckets = {location_of(a, geom, slice_hash) for a in members}
        if len(buckets) > 1:
            problems.append(f'group {group_id} spans {len(buckets)} cache sets')
            continue
        bucket = buckets.pop()
        if bucket in group_of_bucket:
            problems.append(
                f'slice {bucket[0]} set {bucket[1]} is split over groups '
                f'{group_of_bucket[bucket]} and {group_id}'
            )
        group_of_bucket.setdefault(bucket, group_id)
    return problems
