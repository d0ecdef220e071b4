"""
Mapping tables recovered on real hardware, shipped as data, and the CSV
form planted tables are read from and written to.

Each row lists one A2 value per slice column; ``None`` pads the shorter
columns. The tables serve as planted ground truth for the simulator and as
the reference side of ``solver.consistency_report``.

Table files have the columns ``set_index,a2_hex,slice_id``; a set index of
``*`` marks a table shared by every set index.
"""

import logging

import pandas as pd

from core_model import GlobalTableHash, PerSetIndexTablesHash
from errors import ArgumentError

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ['set_index', 'a2_hex', 'slice_id']

# 4 slices, 10MB LLC; the same table holds for every set index
FOUR_SLICE_ROWS = (
    (0x4000, 0x4001, 0x4002, 0x4003),
    (0x4007, 0x4006, 0x4005, 0x4004),
    (0x4009, 0x4008, 0x400b, 0x400a),
    (0x400e, 0x400f, 0x400c, 0x400d),
    (0x4013, 0x4012, 0x4011, 0x4010),
    (0x4014, 0x4015, 0x4016, 0x4017),
    (0x401a, 0x401b, 0x4018, 0x4019),
    (0x401d, 0x401c, 0x401f, 0x401e),
    (0x4021, 0x4020, 0x4023, 0x4022),
    (0x4026, 0x4027, 0x4024, 0x4025),
    (0x4028, 0x4029, 0x402a, 0x402b),
    (0x402f, 0x402e, 0x402d, 0x402c),
    (0x4032, 0x4033, 0x4030, 0x4031),
    (0x4035, 0x4034, 0x4037, 0x4036),
    (0x403b, 0x403a, 0x4039, 0x4038),
    (0x403c, 0x403d, 0x403e, 0x403f),
)

# 6 slices, 15MB LLC; table of set index 1
SIX_SLICE_SET1_ROWS = (
    (0x4000, 0x4001, 0x4002, 0x4003, 0x4007, 0x400e),
    (0x400d, 0x4006, 0x4005, 0x4004, 0x400a, 0x400f),
    (0x4017, 0x400c, 0x4008, 0x4009, 0x400b, 0x4014),
    (0x401a, 0x4016, 0x4012, 0x4013, 0x4010, 0x4015),
    (0x401d, 0x401b, 0x401f, 0x401e, 0x4011, 0x4018),
    (0x4023, 0x401c, 0x4026, 0x4027, 0x4024, 0x4019),
    (0x4029, 0x4022, 0x402b, 0x402a, 0x4025, 0x4020),
    (0x402e, 0x4028, 0x402c, 0x4030, 0x4032, 0x4021),
    (0x4034, 0x402f, 0x4031, 0x4037, 0x4033, 0x402d),
    (0x4039, 0x4035, 0x4036, 0x403d, 0x403e, 0x403a),
    (0x4041, 0x4038, 0x403c, 0x4042, 0x403f, 0x403b),
    (0x4046, 0x4040, 0x4043, 0x4045, 0x404c, 0x4044),
    (0x404b, 0x4047, 0x404e, 0x404f, 0x404d, 0x4048),
    (0x4051, 0x404a, 0x4054, 0x4055, 0x4056, 0x4049),
    (0x405c, 0x4050, 0x4059, 0x4058, 0x4057, 0x4052),
    (0x4065, 0x405d, 0x405e, 0x405f, 0x405a, 0x4053),
    (0x4068, 0x4064, 0x4060, 0x4061, 0x405b, 0x4066),
    (0x406f, 0x4069, 0x406a, 0x406b, 0x4062, 0x4067),
    (0x4072, 0x4073, 0x406d, 0x406c, 0x4063, 0x4070),
    (0x4075, 0x4074, 0x4077, 0x4076, 0x406e, 0x4071),
    (0x407f, 0x407e, 0x407a, 0x407b, 0x4078, 0x407c),
    (None, None, None, None, 0x4079, 0x407d),
)


def table_from_rows(rows):
    """A2 -> slice id, reading column k of every row as slice k."""
    entries = {}
    for row in rows:
        for slice_id, a2 in enumerate(row):
            if a2 is not None:
                entries[a2] = slice_id
    return entries


def four_slice_table():
    return GlobalTableHash(table_from_rows(FOUR_SLICE_ROWS))


def six_slice_set1_table():
    return GlobalTableHash(table_from_rows(SIX_SLICE_SET1_ROWS))


REFERENCE_TABLES = {
    'four_core': four_slice_table,
    'six_core_set1': six_slice_set1_table,
}


def _parse_row(row_number, set_label, a2_hex, slice_text):
    try:
        set_index = None if set_label == '*' else int(set_label)
        a2 = int(a2_hex, 16)
        slice_id = int(slice_text)
    except (TypeError, ValueError):
        raise ArgumentError(
            f"table row {row_number}: cannot read ({set_label!r}, {a2_hex!r}, {slice_text!r})"
        ) from None
    if (set_index is not None and set_index < 0) or a2 < 0 or slice_id < 0:
        raise ArgumentError(f"table row {row_number}: negative value")
    return set_index, a2, slice_id


def read_slice_table(source):
    """
    Planted hash from a table CSV.

    Rows marked ``*`` give a GlobalTableHash; numbered set indexes give a
    PerSetIndexTablesHash in which set indexes with identical entries share
    one table. Mixing both forms is an error.
    """
    frame = pd.read_csv(source, dtype=str, keep_default_na=False)
    missing = [c for c in TABLE_COLUMNS if c not in frame.columns]
    if missing:
        raise ArgumentError(f"table file lacks columns {missing}; expected {TABLE_COLUMNS}")
    if frame.empty:
        raise ArgumentError("table file has no rows")

    by_set = {}
    for row_number, row in enumerate(frame[TABLE_COLUMNS].itertuples(index=False), start=1):
        set_index, a2, slice_id = _parse_row(row_number, *row)
        entries = by_set.setdefault(set_index, {})
        if a2 in entries:
            raise ArgumentError(f"table row {row_number}: A2 {a2:#x} listed twice")
        entries[a2] = slice_id

    if None in by_set:
        if len(by_set) > 1:
            raise ArgumentError("table file mixes '*' rows with numbered set indexes")
        return GlobalTableHash(by_set[None])

    table_of_signature = {}
    tables = []
    table_of_set = {}
    for set_index in sorted(by_set):
        signature = tuple(sorted(by_set[set_index].items()))
        if signature not in table_of_signature:
            table_of_signature[signature] = len(tables)
            tables.append(by_set[set_index])
        table_of_set[set_index] = table_of_signature[signature]
    logger.debug("read %d set indexes, %d distinct tables", len(table_of_set), len(tables))
    return PerSetIndexTablesHash(table_of_set, tables)


def slice_table_frame(slice_hash, geom=None, a2_values=None):
    """
    Table rows of a planted hash.

    Table hashes list their own entries. Formula hashes are evaluated over
    ``a2_values`` and written as one shared table.
    """
    if isinstance(slice_hash, GlobalTableHash):
        rows = [('*', f'{a2:x}', s) for a2, s in sorted(slice_hash.entries.items())]
    elif isinstance(slice_hash, PerSetIndexTablesHash):
        rows = [
            (str(set_index), f'{a2:x}', s)
            for set_index, table_id in sorted(slice_hash.table_of_set.items())
            for a2, s in sorted(slice_hash.tables[table_id].items())
        ]
    else:
        if geom is None or a2_values is None:
            raise ArgumentError(f"{slice_hash.variant} hash needs geom and a2_values to be tabulated")
        rows = [('*', f'{a2:x}', slice_hash.slice_for(a2, 0, geom)) for a2 in sorted(set(a2_values))]
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def write_slice_table(slice_hash, destination, geom=None, a2_values=None):
    slice_table_frame(slice_hash, geom, a2_values).to_csv(destination, index=False, lineterminator='\n')
