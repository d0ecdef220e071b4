"""
Solver module: turn classification output into slice-hash knowledge.

Covers stride scanning (geometry inference from latency knees), mapping
tables per set index, table deduplication, affine GF(2) formula fitting,
hash equivalence up to slice relabeling and formula/table consistency.
"""

import itertools
import logging
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

import settings
from core_model import (
    GlobalTableHash,
    LinearGF2Hash,
    PerSetIndexTablesHash,
    block_address,
    eval_four_core_formula,
    slice_of,
    split_address,
    strided_latency,
)
from errors import ArgumentError, InvariantViolationError, NeedsMoreDataError

logger = logging.getLogger(__name__)

# Exhaustive Walsh-Hadamard search above this many unknowns gets too large
MAX_TRANSFORM_BITS = 22


# -- stride scan ------------------------------------------------------------

@dataclass
class StrideScanResult:
    """
    Knee table of a stride scan and the geometry it implies.

    ``knees`` has columns stride, knee_count, capacity; strides without a
    knee keep missing values there and are listed in ``inconclusive``.
    Strides the oracle cannot measure (the analytic oracle rejects those
    below the line size) are left out of the table and listed in
    ``rejected``.
    """
    knees: pd.DataFrame
    offset_bits: Optional[int] = None
    set_index_bits: Optional[int] = None
    saturated_capacity: Optional[int] = None
    inconclusive: List[int] = field(default_factory=list)
    rejected: List[int] = field(default_factory=list)


def analytic_stride_oracle(geom, model):
    """Stride oracle backed by the occupancy latency model."""
    def oracle(stride, n):
        return strided_latency(n, stride, geom, model)
    return oracle


def _first_true(predicate, candidates):
    """Smallest candidate for which a monotone predicate holds, else None."""
    if not candidates or not predicate(candidates[-1]):
        return None
    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if predicate(candidates[mid]):
            hi = mid
        else:
            lo = mid + 1
    return candidates[lo]


def stride_scan(oracle, strides, array_sizes=None, threshold=None, max_blocks=1 << 20):
    """
    Find the latency knee for every stride.

    Parameters:
    -----------
    oracle : callable
        ``oracle(stride, n)`` -> average latency of n strided blocks
    strides : list
        Strides in bytes
    array_sizes : list, optional
        Accessed block counts to try; 1..max_blocks when omitted
    threshold : float, optional
        Latency cutoff; by default anything above the single-block
        latency counts as leaving the LLC plateau
    max_blocks : int
        Upper end of the default search range

    Returns:
    --------
    StrideScanResult
    """
    strides = sorted(int(s) for s in strides)
    if not strides:
        raise ArgumentError("stride list is empty")
    if array_sizes is not None:
        candidates = sorted({int(n) for n in array_sizes if int(n) >= 1})
    else:
        candidates = range(1, max_blocks + 1)

    rows = []
    inconclusive = []
    rejected = []
    for stride in strides:
        try:
            baseline = oracle(stride, 1)
        except ArgumentError as exc:
            rejected.append(stride)
            logger.warning("stride %d skipped: %s", stride, exc)
            continue
        limit = threshold if threshold is not None else baseline + abs(baseline) * 1e-9
        knee = _first_true(lambda n: oracle(stride, n) > limit, candidates)
        if knee is None:
            inconclusive.append(stride)
            rows.append((stride, pd.NA, pd.NA))
            logger.warning("no knee for stride %d within the scanned sizes", stride)
        else:
            rows.append((stride, knee, knee - 1))
            logger.debug("stride %d: knee at %d blocks", stride, knee)

    knees = pd.DataFrame(rows, columns=['stride', 'knee_count', 'capacity']).astype(
        {'stride': 'int64', 'knee_count': 'Int64', 'capacity': 'Int64'}
    )
    if not rows:
        raise ArgumentError(f"the oracle rejected every stride: {rejected}")
    result = StrideScanResult(knees, inconclusive=inconclusive, rejected=rejected)
    _infer_geometry(result)
    return result


def _infer_geometry(result):
    known = result.knees.dropna()
    if len(known) < 2:
        return
    strides = known['stride'].tolist()
    capacities = [int(c) for c in known['capacity']]
    saturated = capacities[-1]
    result.saturated_capacity = saturated

    if len(set(capacities)) == 1:
        result.offset_bits = strides[0].bit_length() - 1
        result.set_index_bits = 0
        return
    # An oracle that counts lines sees the same capacity for every stride up
    # to the line size, so the line size is the largest stride keeping the
    # smallest stride's capacity
    line = max(s for s, c in zip(strides, capacities) if c == capacities[0])
    saturating = min(s for s, c in zip(strides, capacities) if c == saturated)
    result.offset_bits = line.bit_length() - 1
    result.set_index_bits = (saturating // line).bit_length() - 1
    logger.info("inferred %d offset bits, %d set-index bits, %d lines at saturation",
                result.offset_bits, result.set_index_bits, saturated)


# -- mapping tables ---------------------------------------------------------

@dataclass(frozen=True)
class MappingTable:
    """
    A2 value -> canonical group id for one set index (None stands for "*").
    """
    set_index: Optional[int]
    entries: Mapping[int, int]

    def __post_init__(self):
        object.__setattr__(self, 'entries', MappingProxyType(dict(self.entries)))

    @property
    def label(self):
        return '*' if self.set_index is None else str(self.set_index)

    @property
    def group_count(self):
        return len(set(self.entries.values()))

    def group_sizes(self):
        return sorted(pd.Series(list(self.entries.values()), dtype='int64').value_counts().tolist())

    def same_entries(self, other):
        return dict(self.entries) == dict(other.entries)

    def signature(self):
        return tuple(sorted(self.entries.items()))


def canonical_labels(a2_to_group):
    """Relabel groups 0..k-1 by first occurrence in ascending A2 order."""
    relabel = {}
    entries = {}
    for a2 in sorted(a2_to_group):
        group = a2_to_group[a2]
        if group not in relabel:
            relabel[group] = len(relabel)
        entries[a2] = relabel[group]
    return entries


def build_table(groups, geom):
    """
    Mapping table from the classified groups of one set index.

    Raises:
    -------
    InvariantViolationError
        if groups span several set indexes or outnumber the slices
    """
    a2_to_group = {}
    set_indexes = set()
    classified = groups.classified()
    for group_id, members in classified:
        for address in members:
            fields = split_address(address, geom)
            set_indexes.add(fields.a1)
            a2_to_group[fields.a2] = group_id
    if len(set_indexes) > 1:
        raise InvariantViolationError(
            f"groups span {len(set_indexes)} set indexes: {sorted(set_indexes)[:4]}"
        )
    if len(classified) > geom.slice_count:
        raise InvariantViolationError(
            f"{len(classified)} groups found but the cache has {geom.slice_count} slices"
        )
    set_index = set_indexes.pop() if set_indexes else None
    return MappingTable(set_index, canonical_labels(a2_to_group))


def build_tables(groups, geom):
    """One mapping table per set index touched by ``groups``."""
    by_set = {}
    for group_id, members in groups.classified():
        indexes = {split_address(a, geom).a1 for a in members}
        if len(indexes) != 1:
            raise InvariantViolationError(
                f"group {group_id} spans set indexes {sorted(indexes)[:4]}"
            )
        by_set.setdefault(indexes.pop(), []).append(members)

    tables = []
    for set_index in sorted(by_set):
        members = by_set[set_index]
        if len(members) > geom.slice_count:
            raise InvariantViolationError(
                f"set index {set_index} has {len(members)} groups for {geom.slice_count} slices"
            )
        a2_to_group = {
            split_address(address, geom).a2: k
            for k, group in enumerate(members)
            for address in group
        }
        tables.append(MappingTable(set_index, canonical_labels(a2_to_group)))
    return tables


@dataclass
class DedupResult:
    distinct: List[MappingTable]
    ordinal_of_set: Dict[int, int]

    def sharing(self):
        """Ordinal -> set indexes sharing that table."""
        shared = {}
        for set_index, ordinal in sorted(self.ordinal_of_set.items()):
            shared.setdefault(ordinal, []).append(set_index)
        return shared


def dedup_tables(tables):
    """
    Collapse entry-identical tables; ordinals start at 1 in order of
    first appearance.
    """
    ordinal_of_signature = {}
    distinct = []
    ordinal_of_set = {}
    for table in tables:
        signature = table.signature()
        if signature not in ordinal_of_signature:
            ordinal_of_signature[signature] = len(distinct) + 1
            distinct.append(table)
        ordinal_of_set[table.set_index] = ordinal_of_signature[signature]
    logger.info("%d tables, %d distinct", len(tables), len(distinct))
    return DedupResult(distinct, ordinal_of_set)


# -- GF(2) fitting ----------------------------------------------------------

def _gf2_eliminate(system, unknowns):
    """Reduced row echelon form over the first ``unknowns`` columns."""
    m = system.copy()
    pivots = []
    row = 0
    for col in range(unknowns):
        if row == m.shape[0]:
            break
        hits = np.flatnonzero(m[row:, col])
        if not len(hits):
            continue
        pivot = row + hits[0]
        if pivot != row:
            m[[row, pivot]] = m[[pivot, row]]
        others = np.flatnonzero(m[:, col])
        others = others[others != row]
        m[others] ^= m[row]
        pivots.append(col)
        row += 1
    return m, pivots


def _walsh_hadamard(values):
    transformed = values.astype(np.int64)
    half = 1
    while half < len(transformed):
        blocks = transformed.reshape(-1, 2, half)
        transformed = np.stack(
            (blocks[:, 0, :] + blocks[:, 1, :], blocks[:, 0, :] - blocks[:, 1, :]), axis=1
        ).reshape(-1)
        half *= 2
    return transformed


def _best_affine(columns, target):
    """
    Affine function of ``columns`` (n x k, 0/1) closest to ``target``.

    Returns (selected column indexes, affine bit, residual count).
    """
    n, k = columns.shape
    if k <= MAX_TRANSFORM_BITS:
        weights = np.int64(1) << np.arange(k, dtype=np.int64)
        points = columns.astype(np.int64) @ weights if k else np.zeros(n, dtype=np.int64)
        agreement = np.zeros(1 << k, dtype=np.int64)
        np.add.at(agreement, points, 1 - 2 * target.astype(np.int64))
        spectrum = _walsh_hadamard(agreement)
        plain = (n - spectrum) // 2
        negated = (n + spectrum) // 2
        w0, w1 = int(np.argmin(plain)), int(np.argmin(negated))
        if plain[w0] <= negated[w1]:
            w, constant, residual = w0, 0, int(plain[w0])
        else:
            w, constant, residual = w1, 1, int(negated[w1])
        return [i for i in range(k) if (w >> i) & 1], constant, residual

    # greedy single-bit flips from the constant function
    selected = np.zeros(k, dtype=np.uint8)
    constant = int(target.sum() * 2 > n)

    def residual_of(sel, const):
        prediction = (columns @ sel + const) & 1
        return int(np.count_nonzero(prediction != target))

    best = residual_of(selected, constant)
    improved = True
    while improved:
        improved = False
        for i in range(k):
            for const in (0, 1):
                trial = selected.copy()
                trial[i] ^= 1
                score = residual_of(trial, const)
                if score < best:
                    selected, constant, best, improved = trial, const, score, True
    return [int(i) for i in np.flatnonzero(selected)], constant, best


@dataclass(frozen=True)
class LinearFit:
    """
    Affine GF(2) fit of slice ids: bit j = parity(pa & masks[j]) ^ affine[j].

    ``residuals`` counts assignments whose full slice id the fit gets wrong;
    ``bit_residuals`` counts per output bit.
    """
    masks: Tuple[int, ...]
    affine: Tuple[int, ...]
    bit_residuals: Tuple[int, ...]
    residuals: int
    bits: Tuple[int, ...]

    @property
    def exact(self):
        return self.residuals == 0

    def as_hash(self):
        return LinearGF2Hash(self.masks, self.affine)

    def expression(self):
        lines = []
        for j, (mask, constant) in enumerate(zip(self.masks, self.affine)):
            terms = [f'bit({p})' for p in range(mask.bit_length()) if (mask >> p) & 1]
            if not terms:
                text = str(constant)
            else:
                text = ' XOR '.join(terms)
                if constant:
                    text = f'NOT ({text})'
            status = '' if self.bit_residuals[j] == 0 else f'    # {self.bit_residuals[j]} mismatches'
            lines.append(f'slice_bit{j} = {text}{status}')
        return '\n'.join(lines)


def output_bit_count(slice_count):
    return max(1, (slice_count - 1).bit_length())


def fit_linear_gf2(assignments, geom, bits=None):
    """
    Fit an affine GF(2) function per slice-id bit.

    Parameters:
    -----------
    assignments : Mapping[int, int]
        physical address -> slice id
    geom : CacheGeometry
    bits : list, optional
        Physical bit positions to solve for; by default every A2 bit that
        varies across the assignments

    Returns:
    --------
    LinearFit
        exact when every assignment is reproduced, otherwise the
        minimal-residual affine function per bit

    Raises:
    -------
    NeedsMoreDataError
        if the assignments leave some bit coefficients undetermined
    """
    if not assignments:
        raise ArgumentError("no assignments to fit")
    addresses = np.array(sorted(assignments), dtype=np.int64)
    slices = np.array([assignments[a] for a in addresses.tolist()], dtype=np.int64)
    if slices.min() < 0 or slices.max() >= geom.slice_count:
        raise ArgumentError(f"slice ids must lie in 0..{geom.slice_count - 1}")

    if bits is None:
        candidates = range(geom.low_bits, geom.addr_width_bits)
        bits = [p for p in candidates if len(np.unique((addresses >> p) & 1)) > 1]
    bits = tuple(sorted(bits))
    k = len(bits)
    outputs = output_bit_count(geom.slice_count)

    columns = np.stack([(addresses >> p) & 1 for p in bits], axis=1).astype(np.uint8) \
        if k else np.zeros((len(addresses), 0), dtype=np.uint8)
    targets = np.stack([(slices >> j) & 1 for j in range(outputs)], axis=1).astype(np.uint8)
    ones = np.ones((len(addresses), 1), dtype=np.uint8)
    system = np.hstack([ones, columns, targets])

    reduced, pivots = _gf2_eliminate(system, k + 1)
    free = [bits[c - 1] for c in range(1, k + 1) if c not in pivots]
    if free:
        raise NeedsMoreDataError(free)
    rank = len(pivots)

    masks, affine, bit_residuals = [], [], []
    for j in range(outputs):
        rhs = k + 1 + j
        if reduced[rank:, rhs].any():
            selected, constant, residual = _best_affine(columns, targets[:, j])
            logger.info("slice bit %d is not affine: best fit misses %d of %d points",
                        j, residual, len(addresses))
        else:
            solution = {pivots[r]: int(reduced[r, rhs]) for r in range(rank)}
            constant = solution[0]
            selected = [c - 1 for c in range(1, k + 1) if solution.get(c)]
            residual = 0
        masks.append(sum(1 << bits[i] for i in selected))
        affine.append(constant)
        bit_residuals.append(residual)

    predicted = np.zeros(len(addresses), dtype=np.int64)
    for j, (mask, constant) in enumerate(zip(masks, affine)):
        parity = (np.bitwise_count(addresses & np.int64(mask)).astype(np.int64) & 1) ^ constant
        predicted |= parity << j
    residuals = int(np.count_nonzero(predicted != slices))
    return LinearFit(tuple(masks), tuple(affine), tuple(bit_residuals), residuals, bits)


# -- equivalence ------------------------------------------------------------

@dataclass(frozen=True)
class EquivalenceResult:
    equivalent: bool
    permutation: Optional[Tuple[int, ...]] = None
    witness: Optional[int] = None
    set_count: int = 1

    def verdict(self):
        if self.equivalent and self.permutation is None:
            return f'EQUIVALENT (per set index, {self.set_count} set indexes)'
        if self.equivalent:
            perm = ','.join(str(s) for s in self.permutation)
            return f'EQUIVALENT (perm={perm})'
        return f'NOT EQUIVALENT (witness={self.witness:#x})'


def equivalent_up_to_permutation(h1, h2, domain, geom):
    """
    Look for a slice relabeling pi with pi(h1(a)) == h2(a) on ``domain``.

    Every observed pair fixes one entry of pi, so the first contradiction
    is a witness. Unobserved slices are completed in ascending order.
    """
    forward = {}
    backward = {}
    for address in domain:
        s1 = slice_of(address, geom, h1)
        s2 = slice_of(address, geom, h2)
        if forward.setdefault(s1, s2) != s2 or backward.setdefault(s2, s1) != s1:
            return EquivalenceResult(False, witness=address)
    unused = iter(s for s in range(geom.slice_count) if s not in backward)
    permutation = tuple(
        forward[s] if s in forward else next(unused) for s in range(geom.slice_count)
    )
    return EquivalenceResult(True, permutation=permutation)


def verify_recovered(result, planted, geom, sample_size, seed):
    """
    Compare a CrackResult with the planted hash on a random sample of its domain.

    Group labels are only defined within one set index, so every set index
    gets its own relabeling. When they all agree the verdict carries that
    single permutation.
    """
    recovered = result.to_hash()
    domain = result.sample_domain(geom, sample_size, seed)
    by_set = {}
    for address in domain:
        by_set.setdefault(split_address(address, geom).a1, []).append(address)

    permutations = set()
    for set_index in sorted(by_set):
        verdict = equivalent_up_to_permutation(recovered, planted, by_set[set_index], geom)
        if not verdict.equivalent:
            logger.warning("set index %d disagrees with the planted hash at %#x",
                           set_index, verdict.witness)
            return verdict
        permutations.add(verdict.permutation)
    if len(permutations) == 1:
        return EquivalenceResult(True, permutation=permutations.pop(), set_count=len(by_set))
    logger.info("%d set indexes need %d different relabelings", len(by_set), len(permutations))
    return EquivalenceResult(True, set_count=len(by_set))


# -- consistency ------------------------------------------------------------

def four_core_label(a2):
    bit_a1, bit_a0 = eval_four_core_formula(a2)
    return (bit_a1 << 1) | bit_a0


def _reverse_bits(value, width):
    low = value & ((1 << width) - 1)
    reversed_low = int(format(low, f'0{width}b')[::-1], 2) if width else 0
    return (value >> width << width) | reversed_low


def consistency_report(formula=four_core_label, reference=None, label_count=4, a2_span=15):
    """
    Agreement between a formula and a reference table under every reading.

    A reading picks the A2 bit order (as is, or reversed over ``a2_span``
    bits), the order of the label bits, and a label permutation.

    Parameters:
    -----------
    formula : callable
        a2 -> label
    reference : Mapping[int, int] or MappingTable or GlobalTableHash
        a2 -> label
    label_count : int
        Number of distinct labels

    Returns:
    --------
    pd.DataFrame
        One row per reading, best agreement first
    """
    if reference is None:
        from reference_tables import four_slice_table
        reference = four_slice_table()
    entries = dict(getattr(reference, 'entries', reference))
    domain = sorted(entries)
    if not domain:
        raise ArgumentError("reference table is empty")
    label_bits = output_bit_count(label_count)

    def evaluate(a2):
        try:
            return formula(a2)
        except LookupError:
            return None

    rows = []
    for a2_order in ('as_is', 'reversed'):
        readings = [
            evaluate(a2 if a2_order == 'as_is' else _reverse_bits(a2, a2_span)) for a2 in domain
        ]
        for bit_order in ('msb_first', 'lsb_first'):
            labels = [
                None if v is None else (v if bit_order == 'msb_first' else _reverse_bits(v, label_bits))
                for v in readings
            ]
            for permutation in itertools.permutations(range(label_count)):
                hits = sum(
                    1 for a2, label in zip(domain, labels)
                    if label is not None and label < label_count
                    and permutation[label] == entries[a2]
                )
                rows.append((a2_order, bit_order, ''.join(map(str, permutation)), hits / len(domain)))

    report = pd.DataFrame(rows, columns=['a2_order', 'bit_order', 'permutation', 'agreement'])
    report = report.sort_values('agreement', ascending=False, kind='mergesort').reset_index(drop=True)
    logger.info("best reading agrees on %.1f%% of %d entries",
                100 * report['agreement'].iloc[0], len(domain))
    return report


# -- crack result -----------------------------------------------------------

def high_bit_caveat(geom):
    if geom.addr_width_bits > settings.PROBED_ADDRESS_BITS:
        return (f"bits {settings.PROBED_ADDRESS_BITS}..{geom.addr_width_bits - 1} also feed the "
                "slice hash; the tables only cover the probed A2 values")
    return None


@dataclass
class CrackResult:
    tables: List[MappingTable]
    dedup: DedupResult
    fit: Optional[LinearFit] = None
    fit_note: Optional[str] = None
    equivalence: Optional[EquivalenceResult] = None
    caveat: Optional[str] = None

    @property
    def distinct_count(self):
        return len(self.dedup.distinct)

    def tables_frame(self):
        rows = [
            (table.label, f'{a2:x}', group)
            for table in self.tables
            for a2, group in sorted(table.entries.items())
        ]
        return pd.DataFrame(rows, columns=['set_index', 'a2_hex', 'group_id'])

    def dedup_frame(self):
        rows = sorted(self.dedup.ordinal_of_set.items(), key=lambda kv: (kv[0] is None, kv[0] or 0))
        return pd.DataFrame(
            [('*' if s is None else s, ordinal) for s, ordinal in rows],
            columns=['set_index', 'table_ordinal'],
        )

    def formula_text(self):
        if self.fit is not None:
            return self.fit.expression()
        return self.fit_note or 'no formula'

    def to_hash(self):
        """Recovered hash over the probed set indexes and A2 values."""
        if len(self.dedup.distinct) == 1:
            return GlobalTableHash(self.dedup.distinct[0].entries)
        table_of_set = {s: ordinal - 1 for s, ordinal in self.dedup.ordinal_of_set.items()}
        return PerSetIndexTablesHash(table_of_set, [t.entries for t in self.dedup.distinct])

    def domain(self, geom):
        """Block addresses covered by the tables."""
        return [
            block_address(a2, table.set_index, geom)
            for table in self.tables if table.set_index is not None
            for a2 in sorted(table.entries)
        ]

    def sample_domain(self, geom, size, seed):
        rng = np.random.default_rng(seed)
        blocks = self.domain(geom)
        if not blocks:
            return []
        picks = rng.integers(0, len(blocks), size=size)
        offsets = rng.integers(0, geom.line_size_bytes, size=size)
        return [blocks[i] + int(o) for i, o in zip(picks, offsets)]

    def write(self, out_dir):
        """tables.csv, dedup.csv and formula.txt under ``out_dir``."""
        os.makedirs(out_dir, exist_ok=True)
        self.tables_frame().to_csv(os.path.join(out_dir, 'tables.csv'), index=False, lineterminator='\n')
        self.dedup_frame().to_csv(os.path.join(out_dir, 'dedup.csv'), index=False, lineterminator='\n')
        with open(os.path.join(out_dir, 'formula.txt'), 'w') as handle:
            handle.write(self.formula_text() + '\n')


def read_tables(source):
    """Inverse of CrackResult.tables_frame written as CSV."""
    frame = pd.read_csv(source, dtype=str)
    tables = []
    for label, rows in frame.groupby('set_index', sort=False):
        set_index = None if label == '*' else int(label)
        entries = {int(a2, 16): int(g) for a2, g in zip(rows['a2_hex'], rows['group_id'])}
        tables.append(MappingTable(set_index, entries))
    return tables


def crack_groups(groups, geom):
    """
    Tables, dedup and (for a single distinct table) a GF(2) fit.

    Group labels are arbitrary, so the fit describes the slice function up
    to relabeling of slices.
    """
    tables = build_tables(groups, geom)
    dedup = dedup_tables(tables)
    result = CrackResult(tables, dedup, caveat=high_bit_caveat(geom))
    if result.caveat:
        logger.warning(result.caveat)

    if len(dedup.distinct) == 1 and tables:
        table = tables[0]
        assignments = {block_address(a2, table.set_index, geom): g for a2, g in table.entries.items()}
        try:
            result.fit = fit_linear_gf2(assignments, geom)
        except NeedsMoreDataError as exc:
            result.fit_note = str(exc)
    else:
        result.fit_note = f"{len(dedup.distinct)} distinct tables; the tables are the result"
    return result
