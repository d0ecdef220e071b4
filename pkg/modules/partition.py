"""
Page coloring on top of the set-index field.

A page color is the value of the set-index bits that lie above the page
offset. Pages of different colors can never share a set index, whatever
the slice hash does with the rest of the address.
"""

import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

import settings
from core_model import is_power_of_two, log2_int, slice_of, split_address
from errors import ArgumentError, CapacityError, GeometryError, UnmappedAddressError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ColorScheme:
    """
    Physical bits that make up a page color.

    Parameters:
    -----------
    page_size_bytes : int
        Page size, a power of two
    color_bits : tuple
        Physical bit positions, lowest color bit first
    """
    page_size_bytes: int
    color_bits: Tuple[int, ...]

    def __post_init__(self):
        if not is_power_of_two(self.page_size_bytes):
            raise ArgumentError(f"page size must be a power of two, got {self.page_size_bytes}")
        object.__setattr__(self, 'color_bits', tuple(self.color_bits))

    @classmethod
    def from_geometry(cls, geom, page_size=settings.SLICECRACK_DEFAULT_PAGE_SIZE):
        """Set-index bits at or above the page offset."""
        page_bits = log2_int(page_size)
        first = max(page_bits, geom.offset_bits)
        return cls(page_size, tuple(range(first, geom.low_bits)))

    @property
    def color_count(self):
        return 1 << len(self.color_bits)

    def validate(self, geom):
        outside = [b for b in self.color_bits if not geom.offset_bits <= b < geom.low_bits]
        if outside:
            raise GeometryError(f"color bits {outside} lie outside the set-index field")


def page_color(pa, scheme, geom):
    split_address(pa, geom)
    return sum(((pa >> bit) & 1) << j for j, bit in enumerate(scheme.color_bits))


def _colors_of(addresses, scheme):
    colors = np.zeros(len(addresses), dtype=np.int64)
    for j, bit in enumerate(scheme.color_bits):
        colors |= ((addresses >> bit) & 1) << j
    return colors


def plan_partition(demands, scheme):
    """
    Contiguous color ranges, handed out in client order.

    Parameters:
    -----------
    demands : Mapping[str, int]
        client -> number of colors

    Returns:
    --------
    dict
        client -> tuple of color ids
    """
    total = 0
    for client, quota in demands.items():
        if quota < 0:
            raise ArgumentError(f"client {client} asks for a negative quota {quota}")
        total += quota
    if total > scheme.color_count:
        raise CapacityError(
            f"{total} colors requested but only {scheme.color_count} exist"
        )
    plan = {}
    start = 0
    for client, quota in demands.items():
        plan[client] = tuple(range(start, start + quota))
        start += quota
    return plan


class ViolationWitness(NamedTuple):
    first: int
    second: int
    first_color: int
    second_color: int
    set_index: int
    same_slice: Optional[bool]


@dataclass
class DisjointnessResult:
    ok: bool
    witness: Optional[ViolationWitness] = None
    checked: int = 0

    def summary(self):
        if self.ok:
            return 'disjoint: ok'
        w = self.witness
        return (f'disjoint: VIOLATION {w.first:#x} (color {w.first_color}) and '
                f'{w.second:#x} (color {w.second_color}) share set index {w.set_index}')


def verify_disjoint(assignment, geom, slice_hash, sample, scheme):
    """
    Check that differently colored sample addresses never share a set index.

    Only addresses whose color belongs to some client in ``assignment`` are
    considered.
    """
    assigned = {color for colors in assignment.values() for color in colors}
    addresses = np.asarray(list(sample), dtype=np.int64)
    if len(addresses) and (addresses.min() < 0 or addresses.max() >= geom.address_limit):
        raise ArgumentError("sample holds addresses outside the physical address range")

    frame = pd.DataFrame({
        'address': addresses,
        'color': _colors_of(addresses, scheme),
        'set_index': (addresses >> geom.offset_bits) & (geom.sets_per_slice - 1),
    })
    frame = frame[frame['color'].isin(sorted(assigned))]
    spread = frame.groupby('set_index')['color'].nunique()
    clashing = spread[spread > 1]
    if clashing.empty:
        return DisjointnessResult(True, checked=len(frame))

    set_index = int(clashing.index[0])
    rows = frame[frame['set_index'] == set_index].sort_values('address')
    first = rows.iloc[0]
    second = rows[rows['color'] != first['color']].iloc[0]
    try:
        same_slice = (slice_of(int(first['address']), geom, slice_hash)
                      == slice_of(int(second['address']), geom, slice_hash))
    except UnmappedAddressError:
        same_slice = None
    witness = ViolationWitness(int(first['address']), int(second['address']),
                               int(first['color']), int(second['color']), set_index, same_slice)
    logger.warning("color violation at set index %d", set_index)
    return DisjointnessResult(False, witness, checked=len(frame))


def colored_blocks(geom, scheme, colors, count, base=0):
    """The first ``count`` line addresses at or above ``base`` whose color is in ``colors``."""
    wanted = set(colors)
    if not wanted:
        raise ArgumentError("no colors given")
    found = []
    address = base - base % geom.line_size_bytes
    while len(found) < count:
        if address >= geom.address_limit:
            raise ArgumentError(f"address space exhausted after {len(found)} blocks")
        if page_color(address, scheme, geom) in wanted:
            found.append(address)
        address += geom.line_size_bytes
    return found


def cross_partition_evictions(eviction_log, owner):
    """Evictions where one client's fill displaced another client's line."""
    return sum(
        1 for record in eviction_log
        if record.filled in owner and record.victim in owner
        and owner[record.filled] != owner[record.victim]
    )


def write_plan(plan, destination):
    rows = [(client, color) for client, colors in plan.items() for color in colors]
    pd.DataFrame(rows, columns=['client', 'color_id']).to_csv(
        destination, index=False, lineterminator='\n'
    )


def read_plan(source) -> Dict[str, Tuple[int, ...]]:
    frame = pd.read_csv(source, dtype={'client': str, 'color_id': 'int64'})
    plan = {}
    for client, color in zip(frame['client'], frame['color_id']):
        plan.setdefault(client, []).append(int(color))
    return {client: tuple(colors) for client, colors in plan.items()}
