"""Geometry, address fields, slice hashes and the latency model."""

from collections import Counter

import numpy as np
import pytest

from core_model import (
    PRESET_GEOMETRIES,
    CacheGeometry,
    FourCoreFormulaHash,
    GlobalTableHash,
    LatencyModel,
    LinearGF2Hash,
    block_address,
    deterministic_latency,
    eval_four_core_formula,
    expected_resident_capacity,
    feeding_key,
    latency,
    per_set_index_hash,
    random_table_hash,
    reachable_sets,
    recompose,
    slice_of,
    split_address,
    strided_latency,
)
from errors import AddressRangeError, ArgumentError, GeometryError, UnmappedAddressError
from reference_tables import (
    REFERENCE_TABLES,
    four_slice_table,
    read_slice_table,
    six_slice_set1_table,
    write_slice_table,
)

SIX_SLICE_FEEDING = [0b1000001, 0b100, 0b1000, 0b10000, 0b100000]


def test_preset_block_counts(geom4, geom6):
    assert geom4.block_count == 1 << 28
    assert geom4.blocks_per_set_index == 1 << 17
    assert geom6.block_count == 1 << 30
    assert geom6.blocks_per_set_index == 1 << 19


def test_preset_capacities(geom4, geom6):
    assert geom4.capacity_bytes == 10240 * 1024
    assert geom6.capacity_bytes == 15360 * 1024
    assert geom6.offset_bits == 6
    assert geom6.set_index_bits == 11
    assert geom6.low_bits == 17


@pytest.mark.parametrize('kwargs', [
    dict(line_size_bytes=48, associativity=20, sets_per_slice=2048, slice_count=6,
         addr_width_bits=36, memory_bytes=1 << 30),
    dict(line_size_bytes=64, associativity=20, sets_per_slice=2000, slice_count=6,
         addr_width_bits=36, memory_bytes=1 << 30),
    dict(line_size_bytes=64, associativity=0, sets_per_slice=2048, slice_count=6,
         addr_width_bits=36, memory_bytes=1 << 30),
    dict(line_size_bytes=64, associativity=20, sets_per_slice=2048, slice_count=6,
         addr_width_bits=29, memory_bytes=1 << 28),
    dict(line_size_bytes=64, associativity=20, sets_per_slice=2048, slice_count=0,
         addr_width_bits=36, memory_bytes=1 << 30),
])
def test_inconsistent_geometry_rejected(kwargs):
    with pytest.raises(GeometryError):
        CacheGeometry(**kwargs)


def test_split_and_recompose(geom6):
    pa = 0xbfd60000 | (5 << 6) | 3
    fields = split_address(pa, geom6)
    assert fields.a0 == 3
    assert fields.a1 == 5
    assert fields.a2 == 0xbfd60000 >> 17
    assert recompose(fields, geom6) == pa
    assert fields.recompose(geom6) == pa


def test_split_out_of_range(geom6):
    with pytest.raises(AddressRangeError):
        split_address(1 << 36, geom6)
    with pytest.raises(AddressRangeError):
        block_address(1 << 19, 0, geom6)


def test_linear_hash_slice(geom4, linear4):
    assert slice_of(block_address(0b0001, 0, geom4), geom4, linear4) == 1
    assert slice_of(block_address(0b0010, 0, geom4), geom4, linear4) == 2
    # bit 17 and bit 19 cancel in output bit 0
    assert slice_of(block_address(0b0101, 7, geom4), geom4, linear4) == 0
    assert linear4.output_values() == [0, 1, 2, 3]


def test_linear_hash_validate(geom4):
    with pytest.raises(GeometryError):
        LinearGF2Hash.from_bits([[12, 17]]).validate(geom4)
    with pytest.raises(GeometryError):
        LinearGF2Hash.from_bits([[17], [18], [19]]).validate(geom4)
    LinearGF2Hash.from_bits([[17], [18]], affine=[1, 0]).validate(geom4)


def test_slice_id_beyond_slice_count(geom6):
    bad = GlobalTableHash({0: 7})
    with pytest.raises(GeometryError):
        bad.validate(geom6)
    with pytest.raises(ArgumentError):
        slice_of(0, geom6, bad)


def test_unmapped_table_entry(geom6):
    table = GlobalTableHash({0: 1})
    with pytest.raises(UnmappedAddressError):
        slice_of(block_address(1, 0, geom6), geom6, table)


@pytest.mark.parametrize('a2, expected', [
    (0x0000, (0, 0)),
    (0x0001, (1, 1)),
    (0x2000, (1, 1)),
    (0x6000, (1, 0)),
    (0x7000, (0, 1)),
])
def test_four_core_formula_values(a2, expected):
    assert eval_four_core_formula(a2) == expected


def test_four_core_formula_ignores_high_bits():
    assert eval_four_core_formula(0x1234 | (1 << 15) | (1 << 20)) == eval_four_core_formula(0x1234)


def test_four_core_hash_folds_on_two_slices():
    geom2 = CacheGeometry(64, 20, 2048, 2, 34, 16 << 30)
    a2 = 0x6000
    assert FourCoreFormulaHash().slice_for(a2, 0, geom2) == eval_four_core_formula(a2)[1]


def test_random_table_balanced_and_deterministic(geom6):
    domain = range(0x4000, 0x4080)
    table = random_table_hash(geom6, domain, seed=7)
    sizes = [list(table.entries.values()).count(s) for s in range(6)]
    assert sizes == [21, 21, 21, 21, 22, 22]
    assert table == random_table_hash(geom6, domain, seed=7)
    assert table != random_table_hash(geom6, domain, seed=8)


def test_feeding_key():
    assert feeding_key(0b1000001, SIX_SLICE_FEEDING) == 0
    assert feeding_key(0b0000001, SIX_SLICE_FEEDING) == 1
    assert feeding_key(0b0100000, SIX_SLICE_FEEDING) == 16


def test_per_set_index_hash_shares_tables(geom6):
    domain = range(0x4000, 0x4080)
    base = random_table_hash(geom6, domain, seed=7)
    planted = per_set_index_hash(base, geom6, domain, SIX_SLICE_FEEDING)
    planted.validate(geom6)
    assert len(planted.tables) == 32
    shared = planted.table_of_set
    assert shared[0] == shared[2] == shared[65] == shared[67]
    assert shared[1] == shared[3] == shared[64] == shared[66]
    assert shared[0] != shared[1]
    # set 0 has key 0, so its table is the base table
    assert planted.slice_for(0x4005, 0, geom6) == base.slice_for(0x4005, 0, geom6)
    assert planted.slice_for(0x4005, 1, geom6) == base.slice_for(0x4004, 0, geom6)


def test_per_set_index_hash_needs_closed_domain(geom6):
    domain = range(0x4000, 0x4003)
    base = random_table_hash(geom6, domain, seed=1)
    with pytest.raises(ArgumentError):
        per_set_index_hash(base, geom6, domain, SIX_SLICE_FEEDING)


def test_reference_tables():
    four = four_slice_table()
    assert len(four.entries) == 64
    assert sorted(list(four.entries.values()).count(s) for s in range(4)) == [16] * 4
    assert four.entries[0x4000] == 0
    assert four.entries[0x4007] == 0
    six = six_slice_set1_table()
    assert len(six.entries) == 128
    assert sorted(list(six.entries.values()).count(s) for s in range(6)) == [21, 21, 21, 21, 22, 22]
    assert set(REFERENCE_TABLES) == {'four_core', 'six_core_set1'}


def test_slice_table_file_round_trip(tmp_path, geom4):
    path = tmp_path / 'four.csv'
    write_slice_table(four_slice_table(), path)
    lines = path.read_text().splitlines()
    assert lines[:2] == ['set_index,a2_hex,slice_id', '*,4000,0']
    assert len(lines) == 65
    assert read_slice_table(path) == four_slice_table()

    formula = tmp_path / 'formula.csv'
    write_slice_table(FourCoreFormulaHash(), formula, geom4, range(0x4000, 0x4010))
    loaded = read_slice_table(formula)
    assert all(
        loaded.slice_for(a2, 5, geom4) == FourCoreFormulaHash().slice_for(a2, 5, geom4)
        for a2 in range(0x4000, 0x4010)
    )
    with pytest.raises(ArgumentError):
        write_slice_table(FourCoreFormulaHash(), tmp_path / 'bare.csv')


def test_per_set_table_file_round_trip(tmp_path):
    geom = CacheGeometry(64, 8, 4, 2, 30, 1 << 30)
    planted = per_set_index_hash(LinearGF2Hash.from_bits([[8, 9]]), geom, range(16), [1])
    path = tmp_path / 'tables.csv'
    write_slice_table(planted, path)
    assert path.read_text().splitlines()[1] == '0,0,0'
    loaded = read_slice_table(path)
    assert dict(loaded.table_of_set) == {0: 0, 1: 1, 2: 0, 3: 1}
    assert [dict(t) for t in loaded.tables] == [dict(t) for t in planted.tables]


@pytest.mark.parametrize('associativity', [4, 8, 20])
def test_latency_matches_occupancy_model(associativity, model):
    geom = CacheGeometry(64, associativity, 2048, 6, 36, 64 << 30)
    for n in range(1, 201):
        expected = model.l_llc if n <= associativity else (
            model.l_memory * (n / associativity - 1) + model.l_llc)
        assert latency(n, geom, model) == pytest.approx(expected, abs=1e-9)


def test_latency_examples(geom6, model):
    assert latency(20, geom6, model) == 40
    assert latency(21, geom6, model) == pytest.approx(50)
    assert deterministic_latency(40, 20, model) == pytest.approx(240)


def test_latency_rejects_empty(geom6, model):
    with pytest.raises(ArgumentError):
        latency(0, geom6, model)


def test_noisy_latency_is_seeded(geom6):
    noisy = LatencyModel(40, 200, noise_stddev=10, rng_seed=3)
    assert latency(25, geom6, noisy, draw=1) == latency(25, geom6, noisy, draw=1)
    assert latency(25, geom6, noisy, draw=1) != latency(25, geom6, noisy, draw=2)


def test_latency_model_validation():
    with pytest.raises(ArgumentError):
        LatencyModel(200, 40)
    with pytest.raises(ArgumentError):
        LatencyModel(40, 200, noise_stddev=-1)


def test_stride_capacities(geom6):
    assert reachable_sets(64, geom6) == 2048
    assert expected_resident_capacity(64, geom6) == 245760
    assert expected_resident_capacity(32 << 10, geom6) == 480
    assert expected_resident_capacity(128 << 10, geom6) == 120
    assert expected_resident_capacity(256 << 20, geom6) == 120
    with pytest.raises(ArgumentError):
        reachable_sets(32, geom6)
    with pytest.raises(ArgumentError):
        reachable_sets(96, geom6)


def test_strided_latency_knee(geom6, model):
    stride = 128 << 10
    assert strided_latency(120, stride, geom6, model) == 40
    assert strided_latency(121, stride, geom6, model) > 40
    curve = [strided_latency(n, stride, geom6, model) for n in range(1, 400)]
    assert curve == sorted(curve)


def test_preset_names():
    assert set(PRESET_GEOMETRIES) == {'4-slice-10mb', '6-slice-15mb'}


def test_four_core_formula_is_balanced():
    counts = Counter((a1 << 1) | a0 for a1, a0 in map(eval_four_core_formula, range(1 << 15)))
    assert counts == {0: 8192, 1: 8192, 2: 8192, 3: 8192}


def test_random_addresses_round_trip(geom6):
    rng = np.random.default_rng(12)
    for pa in rng.integers(0, 1 << 36, size=100000, dtype=np.int64).tolist():
        assert recompose(split_address(pa, geom6), geom6) == pa


def _hash_variants(geom):
    domain = range(0x4000, 0x4080)
    table = random_table_hash(geom, domain, seed=4)
    return {
        'linear': LinearGF2Hash.from_bits([[17, 19, 22], [18, 20, 30]]),
        'four_core': FourCoreFormulaHash(),
        'global_table': table,
        'per_set_index': per_set_index_hash(table, geom, domain, [1, 2]),
    }


@pytest.mark.parametrize('variant', ['linear', 'four_core', 'global_table', 'per_set_index'])
def test_slice_ignores_offset_and_set_bits(geom4, variant):
    slice_hash = _hash_variants(geom4)[variant]
    rng = np.random.default_rng(3)
    for _ in range(300):
        a2 = int(rng.integers(0x4000, 0x4080))
        set_index = int(rng.integers(geom4.sets_per_slice))
        other_set = set_index if variant == 'per_set_index' else int(rng.integers(geom4.sets_per_slice))
        first = block_address(a2, set_index, geom4) + int(rng.integers(64))
        second = block_address(a2, other_set, geom4) + int(rng.integers(64))
        assert slice_of(first, geom4, slice_hash) == slice_of(second, geom4, slice_hash)


@pytest.mark.parametrize('associativity', [1, 4, 20])
def test_latency_never_drops_with_more_blocks(associativity, model):
    geom = CacheGeometry(64, associativity, 2048, 6, 36, 64 << 30)
    curve = [latency(n, geom, model) for n in range(1, 300)]
    assert all(later >= earlier for earlier, later in zip(curve, curve[1:]))


@pytest.mark.parametrize('geom_name', ['4-slice-10mb', '6-slice-15mb'])
def test_resident_capacity_shrinks_with_stride(geom_name):
    geom = PRESET_GEOMETRIES[geom_name]
    capacities = [expected_resident_capacity(64 << k, geom) for k in range(23)]
    assert all(later <= earlier for earlier, later in zip(capacities, capacities[1:]))
    assert min(capacities) == geom.slice_count * geom.associativity
