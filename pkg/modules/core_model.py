"""
Cache geometry, address decomposition, slice-hash representations and the
analytic latency model.

Everything in here is immutable and side-effect free, so instances can be
shared freely between the simulator, the solver and the probe.
"""

import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from errors import (
    AddressRangeError,
    ArgumentError,
    GeometryError,
    UnmappedAddressError,
)

logger = logging.getLogger(__name__)


def is_power_of_two(value):
    return value > 0 and value & (value - 1) == 0


def log2_int(value):
    return value.bit_length() - 1


def _parity(value):
    return value.bit_count() & 1


@dataclass(frozen=True)
class CacheGeometry:
    """
    Geometry of a sliced, set-associative last-level cache.

    Parameters:
    -----------
    line_size_bytes : int
        Cache line (data block) size, a power of two
    associativity : int
        Ways per cache set (N)
    sets_per_slice : int
        Sets in every slice, a power of two
    slice_count : int
        Number of slices; need not be a power of two
    addr_width_bits : int
        Physical address width, 30 to 48 bits
    memory_bytes : int
        Installed memory
    """
    line_size_bytes: int
    associativity: int
    sets_per_slice: int
    slice_count: int
    addr_width_bits: int
    memory_bytes: int

    def __post_init__(self):
        if not is_power_of_two(self.line_size_bytes):
            raise GeometryError(f"line size must be a power of two, got {self.line_size_bytes}")
        if self.associativity < 1:
            raise GeometryError(f"associativity must be positive, got {self.associativity}")
        if not is_power_of_two(self.sets_per_slice):
            raise GeometryError(f"sets per slice must be a power of two, got {self.sets_per_slice}")
        if self.slice_count < 1:
            raise GeometryError(f"slice count must be at least 1, got {self.slice_count}")
        if not 30 <= self.addr_width_bits <= 48:
            raise GeometryError(f"address width must be 30..48 bits, got {self.addr_width_bits}")
        if self.memory_bytes <= 0 or self.memory_bytes % self.line_size_bytes:
            raise GeometryError(
                f"memory size {self.memory_bytes} is not a multiple of the line size"
            )
        if self.block_count % self.sets_per_slice:
            raise GeometryError(
                f"{self.block_count} blocks do not divide evenly over {self.sets_per_slice} set indexes"
            )

    @property
    def offset_bits(self):
        return log2_int(self.line_size_bytes)

    @property
    def set_index_bits(self):
        return log2_int(self.sets_per_slice)

    @property
    def low_bits(self):
        """Offset plus set-index bits; A2 starts at this bit position."""
        return self.offset_bits + self.set_index_bits

    @property
    def a2_bits(self):
        return self.addr_width_bits - self.low_bits

    @property
    def capacity_bytes(self):
        return self.line_size_bytes * self.associativity * self.sets_per_slice * self.slice_count

    @property
    def block_count(self):
        return self.memory_bytes // self.line_size_bytes

    @property
    def blocks_per_set_index(self):
        return self.block_count // self.sets_per_slice

    @property
    def address_limit(self):
        return 1 << self.addr_width_bits


PRESET_GEOMETRIES = {
    # 10240kB shared LLC, 4 slices, 20-way, 16GB installed
    '4-slice-10mb': CacheGeometry(64, 20, 2048, 4, 34, 16 << 30),
    # 15360kB shared LLC, 6 slices, 20-way, 64GB installed
    '6-slice-15mb': CacheGeometry(64, 20, 2048, 6, 36, 64 << 30),
}


class AddressFields(NamedTuple):
    """A physical address split into (A2, A1, A0)."""
    a2: int
    a1: int
    a0: int

    def recompose(self, geom):
        return recompose(self, geom)


def split_address(pa, geom):
    """Split a physical address into tag-side A2, set index A1 and line offset A0."""
    if not 0 <= pa < geom.address_limit:
        raise AddressRangeError(
            f"address {pa:#x} does not fit in {geom.addr_width_bits} bits"
        )
    a0 = pa & (geom.line_size_bytes - 1)
    a1 = (pa >> geom.offset_bits) & (geom.sets_per_slice - 1)
    a2 = pa >> geom.low_bits
    return AddressFields(a2, a1, a0)


def recompose(fields, geom):
    a2, a1, a0 = fields
    return (a2 << geom.low_bits) | (a1 << geom.offset_bits) | a0


def block_address(a2, set_index, geom):
    """Line-aligned physical address of the block with the given A2 and set index."""
    pa = recompose(AddressFields(a2, set_index, 0), geom)
    if pa >= geom.address_limit:
        raise AddressRangeError(f"A2 value {a2:#x} does not fit in {geom.addr_width_bits} bits")
    return pa


def set_index_of(pa, geom):
    return split_address(pa, geom).a1


def slice_of(pa, geom, slice_hash):
    """Slice id of a physical address under the given hash."""
    fields = split_address(pa, geom)
    slice_id = slice_hash.slice_for(fields.a2, fields.a1, geom)
    if slice_id >= geom.slice_count:
        raise ArgumentError(
            f"{slice_hash.variant} hash maps {pa:#x} to slice {slice_id}, "
            f"but the cache has {geom.slice_count} slices"
        )
    return slice_id


def location_of(pa, geom, slice_hash):
    """(slice_id, set_index) of a physical address."""
    return slice_of(pa, geom, slice_hash), set_index_of(pa, geom)


# -- slice hashes -----------------------------------------------------------

class SliceHash:
    """Common interface of every slice-hash representation."""

    variant = None

    def slice_for(self, a2, set_index, geom):
        raise NotImplementedError

    def validate(self, geom):
        """Raise GeometryError if the hash cannot be used with geom."""


@dataclass(frozen=True)
class LinearGF2Hash(SliceHash):
    """
    Affine GF(2) slice function.

    Output bit j is the parity of ``pa & masks[j]`` XOR ``affine[j]``.
    Masks are over physical address bit positions.
    """
    masks: Tuple[int, ...]
    affine: Tuple[int, ...]

    variant = 'linear'

    def __post_init__(self):
        if len(self.masks) != len(self.affine):
            raise ArgumentError("need one affine bit per output bit")
        if any(bit not in (0, 1) for bit in self.affine):
            raise ArgumentError(f"affine bits must be 0 or 1, got {self.affine}")
        if any(mask < 0 for mask in self.masks):
            raise ArgumentError("bit masks must be non-negative")

    @classmethod
    def from_bits(cls, bit_lists, affine=None):
        """Build from per-output lists of physical bit positions."""
        masks = tuple(sum(1 << b for b in set(bits)) for bits in bit_lists)
        if affine is None:
            affine = (0,) * len(masks)
        return cls(masks, tuple(affine))

    def slice_for(self, a2, set_index, geom):
        pa = a2 << geom.low_bits
        value = 0
        for j, (mask, constant) in enumerate(zip(self.masks, self.affine)):
            value |= (_parity(pa & mask) ^ constant) << j
        return value

    def output_values(self):
        """Every slice id the function can produce (an affine subspace)."""
        constant = sum(bit << j for j, bit in enumerate(self.affine))
        columns = set()
        all_bits = 0
        for mask in self.masks:
            all_bits |= mask
        for position in range(all_bits.bit_length()):
            column = sum(((mask >> position) & 1) << j for j, mask in enumerate(self.masks))
            if column:
                columns.add(column)
        span = {0}
        for column in sorted(columns):
            if column not in span:
                span |= {value ^ column for value in span}
        return sorted(constant ^ value for value in span)

    def validate(self, geom):
        low_mask = (1 << geom.low_bits) - 1
        for j, mask in enumerate(self.masks):
            if mask >> geom.addr_width_bits:
                raise GeometryError(f"output bit {j} references bits beyond {geom.addr_width_bits}")
            if mask & low_mask:
                raise GeometryError(
                    f"output bit {j} references offset or set-index bits (mask {mask:#x})"
                )
        largest = self.output_values()[-1]
        if largest >= geom.slice_count:
            raise GeometryError(
                f"linear hash can produce slice {largest} but the cache has {geom.slice_count} slices"
            )


def eval_four_core_formula(a2):
    """
    Evaluate the two intermediate bits of the 4-slice mapping formula.

    Only A2 bits 0..14 take part; higher bits are ignored.

    Returns:
    --------
    tuple
        (bit_a1, bit_a0)
    """
    def bit(i):
        return (a2 >> i) & 1

    bit_a0 = (bit(0) ^ bit(1) ^ bit(2) ^ bit(3) ^ bit(4) ^ bit(5) ^ bit(7) ^ bit(9) ^ bit(10)
              ^ (bit(12) & bit(14))
              ^ ((1 - bit(14)) & bit(13)))
    bit_a1 = (bit(0) ^ bit(2) ^ bit(4) ^ bit(6) ^ bit(8) ^ bit(10) ^ bit(11) ^ bit(13)
              ^ (bit(14) & bit(13) & bit(12)))
    return bit_a1, bit_a0


FOUR_CORE_EXPRESSIONS = {
    'bit_a0': ('bit(0) XOR bit(1) XOR bit(2) XOR bit(3) XOR bit(4) XOR bit(5) XOR bit(7) '
               'XOR bit(9) XOR bit(10) XOR (bit(12) AND bit(14)) XOR ((NOT bit(14)) AND bit(13))'),
    'bit_a1': ('bit(0) XOR bit(2) XOR bit(4) XOR bit(6) XOR bit(8) XOR bit(10) XOR bit(11) '
               'XOR bit(13) XOR (bit(14) AND bit(13) AND bit(12))'),
}


@dataclass(frozen=True)
class FourCoreFormulaHash(SliceHash):
    """
    The 4-slice mux formula: slice = 2*bit_a1 + bit_a0.

    On caches with fewer than four slices the mux output is folded modulo
    the slice count (a 2-slice part selects by bit_a0 alone).
    """

    variant = 'four_core'

    def slice_for(self, a2, set_index, geom):
        bit_a1, bit_a0 = eval_four_core_formula(a2)
        return ((bit_a1 << 1) | bit_a0) % geom.slice_count


def _frozen_table(entries):
    return MappingProxyType({int(a2): int(s) for a2, s in entries.items()})


class GlobalTableHash(SliceHash):
    """One A2 -> slice table shared by every set index."""

    variant = 'global_table'

    def __init__(self, entries: Mapping[int, int]):
        self.entries = _frozen_table(entries)

    def slice_for(self, a2, set_index, geom):
        try:
            return self.entries[a2]
        except KeyError:
            raise UnmappedAddressError(a2) from None

    def validate(self, geom):
        _validate_table(self.entries, geom)

    def __eq__(self, other):
        return isinstance(other, GlobalTableHash) and dict(self.entries) == dict(other.entries)

    __hash__ = None

    def __repr__(self):
        return f'GlobalTableHash({len(self.entries)} entries)'


class PerSetIndexTablesHash(SliceHash):
    """
    A family of A2 -> slice tables selected by set index.

    Parameters:
    -----------
    table_of_set : Mapping[int, int]
        set index -> position in ``tables``
    tables : Sequence[Mapping[int, int]]
        The distinct tables
    """

    variant = 'per_set_index'

    def __init__(self, table_of_set: Mapping[int, int], tables: Sequence[Mapping[int, int]]):
        self.table_of_set = MappingProxyType(dict(table_of_set))
        self.tables = tuple(_frozen_table(t) for t in tables)
        for set_index, table_id in self.table_of_set.items():
            if not 0 <= table_id < len(self.tables):
                raise ArgumentError(f"set index {set_index} points at missing table {table_id}")

    def slice_for(self, a2, set_index, geom):
        table_id = self.table_of_set.get(set_index)
        if table_id is None:
            raise UnmappedAddressError(a2, set_index)
        try:
            return self.tables[table_id][a2]
        except KeyError:
            raise UnmappedAddressError(a2, set_index) from None

    def validate(self, geom):
        missing = [s for s in range(geom.sets_per_slice) if s not in self.table_of_set]
        if missing:
            raise GeometryError(
                f"{len(missing)} set indexes have no table (first: {missing[0]})"
            )
        for table in self.tables:
            _validate_table(table, geom)

    def __repr__(self):
        return f'PerSetIndexTablesHash({len(self.table_of_set)} set indexes, {len(self.tables)} tables)'


def _validate_table(entries, geom):
    for a2, slice_id in entries.items():
        if not 0 <= slice_id < geom.slice_count:
            raise GeometryError(
                f"table maps A2 {a2:#x} to slice {slice_id}, cache has {geom.slice_count} slices"
            )
        if a2 < 0 or a2 >> geom.a2_bits:
            raise GeometryError(f"A2 value {a2:#x} does not fit in {geom.a2_bits} bits")


def random_table_hash(geom, a2_values, seed):
    """
    Balanced random GlobalTable over ``a2_values``.

    Slice sizes differ by at most one; the larger shares go to the highest
    slice ids (128 values over 6 slices -> 21,21,21,21,22,22).
    """
    a2_values = sorted(set(a2_values))
    base, extra = divmod(len(a2_values), geom.slice_count)
    labels = []
    for slice_id in range(geom.slice_count):
        size = base + (1 if slice_id >= geom.slice_count - extra else 0)
        labels.extend([slice_id] * size)
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(np.array(labels, dtype=np.int64))
    return GlobalTableHash({a2: int(s) for a2, s in zip(a2_values, shuffled)})


def feeding_key(set_index, feeding_masks):
    """Bit j of the key is the parity of ``set_index & feeding_masks[j]``."""
    return sum(_parity(set_index & mask) << j for j, mask in enumerate(feeding_masks))


def per_set_index_hash(base, geom, a2_values, feeding_masks):
    """
    Materialise a set-index-dependent hash from a base hash.

    The table of set index s maps a2 to ``base(a2 XOR key(s))`` for every
    a2 in ``a2_values``; set indexes with equal keys share a table.
    """
    a2_values = sorted(set(a2_values))
    table_of_key = {}
    tables = []
    table_of_set = {}
    for set_index in range(geom.sets_per_slice):
        key = feeding_key(set_index, feeding_masks)
        if key not in table_of_key:
            try:
                table = {a2: base.slice_for(a2 ^ key, set_index, geom) for a2 in a2_values}
            except UnmappedAddressError as exc:
                raise ArgumentError(
                    f"A2 domain is not closed under XOR with key {key:#x}: {exc}"
                ) from None
            table_of_key[key] = len(tables)
            tables.append(table)
        table_of_set[set_index] = table_of_key[key]
    logger.debug("per-set-index hash: %d set indexes, %d tables", len(table_of_set), len(tables))
    return PerSetIndexTablesHash(table_of_set, tables)


# -- latency model ----------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    """
    Average access latency as a function of set occupancy.

    Parameters:
    -----------
    l_llc : float
        Latency of an LLC hit (cycles)
    l_memory : float
        Latency of a main-memory access (cycles)
    noise_stddev : float
        Standard deviation of seeded Gaussian noise, 0 for deterministic
    rng_seed : int
        Seed for the noise
    """
    l_llc: float
    l_memory: float
    noise_stddev: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.l_memory > self.l_llc > 0:
            raise ArgumentError(
                f"need l_memory > l_llc > 0, got l_llc={self.l_llc}, l_memory={self.l_memory}"
            )
        if self.noise_stddev < 0:
            raise ArgumentError(f"noise_stddev must be non-negative, got {self.noise_stddev}")

    @property
    def deterministic(self):
        return self.noise_stddev == 0


def deterministic_latency(n, associativity, model):
    """Noise-free latency of cycling n blocks through one N-way set."""
    if n < associativity:
        return model.l_llc
    return model.l_memory * (n / associativity - 1) + model.l_llc


def latency(n, geom, model, draw=0):
    """
    Average latency when n distinct blocks cycle through one cache set.

    ``draw`` selects an independent noise sample for the same n; the result
    is a pure function of (model, n, draw).
    """
    if n < 1:
        raise ArgumentError(f"need at least one block, got {n}")
    value = deterministic_latency(n, geom.associativity, model)
    if model.noise_stddev > 0:
        rng = np.random.default_rng([model.rng_seed, n, draw])
        value += rng.normal(0.0, model.noise_stddev)
    return value


def reachable_sets(stride_bytes, geom):
    """Distinct set indexes an arithmetic stride can touch."""
    if stride_bytes < geom.line_size_bytes:
        raise ArgumentError(
            f"stride {stride_bytes} is below the line size {geom.line_size_bytes}"
        )
    if not is_power_of_two(stride_bytes):
        raise ArgumentError(f"stride must be a power of two, got {stride_bytes}")
    lines_per_stride = stride_bytes // geom.line_size_bytes
    return max(1, geom.sets_per_slice // min(geom.sets_per_slice, lines_per_stride))


def expected_resident_capacity(stride_bytes, geom):
    """Number of lines the cache can hold when accessed with the given stride."""
    return geom.slice_count * geom.associativity * reachable_sets(stride_bytes, geom)


def strided_latency(n, stride_bytes, geom, model):
    """
    Deterministic average latency of n strided blocks.

    The blocks spread evenly over every reachable (slice, set) bucket and
    each bucket follows the occupancy latency; the result is the
    block-weighted mean.
    """
    if n < 1:
        raise ArgumentError(f"need at least one block, got {n}")
    buckets = geom.slice_count * reachable_sets(stride_bytes, geom)
    depth, fuller = divmod(n, buckets)
    total = fuller * (depth + 1) * deterministic_latency(depth + 1, geom.associativity, model)
    if depth:
        total += (buckets - fuller) * depth * deterministic_latency(depth, geom.associativity, model)
    return total / n
