"""Page coloring, partition plans and the disjointness check."""

import io

import numpy as np
import pytest

from core_model import CacheGeometry, LinearGF2Hash, random_table_hash
from errors import AddressRangeError, ArgumentError, CapacityError, GeometryError
from partition import (
    ColorScheme,
    colored_blocks,
    cross_partition_evictions,
    page_color,
    plan_partition,
    read_plan,
    verify_disjoint,
    write_plan,
)
from simulator import SlicedCache, WorkloadConfig, run_workloads


@pytest.fixture
def scheme6(geom6):
    return ColorScheme.from_geometry(geom6)


def test_color_bits_of_six_slice(geom6, scheme6):
    assert scheme6.color_bits == (12, 13, 14, 15, 16)
    assert scheme6.color_count == 32
    scheme6.validate(geom6)


@pytest.mark.parametrize('pa, color', [
    (0x0, 0),
    (0x1000, 1),
    (0x1fff, 1),
    (0x1f000, 31),
    (0x20000, 0),
])
def test_page_color(geom6, scheme6, pa, color):
    assert page_color(pa, scheme6, geom6) == color


def test_page_color_out_of_range(geom6, scheme6):
    with pytest.raises(AddressRangeError):
        page_color(1 << 36, scheme6, geom6)


def test_scheme_validation(geom6):
    with pytest.raises(GeometryError):
        ColorScheme(4096, (12, 17)).validate(geom6)
    with pytest.raises(ArgumentError):
        ColorScheme(3000, (12,))


def test_large_pages_leave_no_colors(geom6):
    scheme = ColorScheme.from_geometry(geom6, page_size=2 << 20)
    assert scheme.color_bits == ()
    assert scheme.color_count == 1


def test_plan_partition(scheme6):
    plan = plan_partition({'A': 16, 'B': 16}, scheme6)
    assert plan == {'A': tuple(range(16)), 'B': tuple(range(16, 32))}
    assert plan_partition({'A': 32}, scheme6) == {'A': tuple(range(32))}
    assert plan_partition({'A': 0, 'B': 1}, scheme6) == {'A': (), 'B': (0,)}


def test_plan_over_capacity(scheme6):
    with pytest.raises(CapacityError):
        plan_partition({'A': 20, 'B': 20}, scheme6)
    with pytest.raises(ArgumentError):
        plan_partition({'A': -1}, scheme6)


def test_random_sample_is_disjoint(geom6, scheme6):
    planted = random_table_hash(geom6, range(0x4000, 0x4080), seed=7)
    plan = plan_partition({'A': 16, 'B': 16}, scheme6)
    sample = np.random.default_rng(0).integers(0, 1 << 36, size=100000)
    result = verify_disjoint(plan, geom6, planted, sample, scheme6)
    assert result.ok
    assert result.checked == 100000
    assert result.summary() == 'disjoint: ok'


def test_exhaustive_small_geometry():
    geom = CacheGeometry(64, 4, 16, 2, 30, 1 << 30)
    scheme = ColorScheme.from_geometry(geom, page_size=256)
    assert scheme.color_count == 4
    plan = plan_partition({'A': 1, 'B': 1, 'C': 2}, scheme)
    result = verify_disjoint(plan, geom, LinearGF2Hash.from_bits([[10]]), range(1 << 14), scheme)
    assert result.ok
    assert result.checked == 1 << 14


def test_single_color_plan(geom6, scheme6):
    plan = plan_partition({'A': 1}, scheme6)
    sample = colored_blocks(geom6, scheme6, [0, 1], 500)
    assert verify_disjoint(plan, geom6, LinearGF2Hash((), ()), sample, scheme6).ok


def test_wrong_color_bits_give_witness(geom6):
    wrong = ColorScheme(4096, (12, 13, 14, 15, 17))
    plan = plan_partition({'A': 16, 'B': 16}, wrong)
    sample = np.random.default_rng(1).integers(0, 1 << 36, size=20000)
    planted = LinearGF2Hash.from_bits([[17]])
    result = verify_disjoint(plan, geom6, planted, sample, wrong)
    assert not result.ok
    w = result.witness
    assert w.first_color != w.second_color
    assert (w.first >> 6) & 2047 == (w.second >> 6) & 2047 == w.set_index
    assert w.same_slice is not None
    assert result.summary().startswith('disjoint: VIOLATION')


def test_sample_must_fit_address_width(geom6, scheme6):
    with pytest.raises(ArgumentError):
        verify_disjoint({'A': (0,)}, geom6, LinearGF2Hash((), ()), [1 << 36], scheme6)


def test_colored_blocks(geom6, scheme6):
    blocks = colored_blocks(geom6, scheme6, [3], 10, base=0x3040)
    assert blocks[0] == 0x3040
    assert all(page_color(b, scheme6, geom6) == 3 for b in blocks)
    with pytest.raises(ArgumentError):
        colored_blocks(geom6, scheme6, [], 1)


def _isolation_run(geom, planted, scheme, accesses_per_client):
    half = scheme.color_count // 2
    plan = plan_partition({'A': half, 'B': half}, scheme)
    # each client alone overflows its half of the cache
    count = geom.associativity * geom.slice_count * geom.sets_per_slice
    a_blocks = colored_blocks(geom, scheme, plan['A'], count)
    b_blocks = colored_blocks(geom, scheme, plan['B'], count)
    cache = SlicedCache(geom, planted)
    configs = [
        WorkloadConfig(a_blocks, 1, accesses_per_client, dirty_writes=True),
        WorkloadConfig(b_blocks, 2, accesses_per_client, dirty_writes=True),
    ]
    run_workloads(cache, configs)
    owner = {a: 'A' for a in a_blocks}
    owner.update({b: 'B' for b in b_blocks})
    return cache, cross_partition_evictions(cache.eviction_log, owner)


def test_colored_workloads_do_not_interfere():
    geom = CacheGeometry(64, 4, 512, 2, 30, 1 << 30)
    planted = LinearGF2Hash.from_bits([[15, 17]])
    scheme = ColorScheme.from_geometry(geom)
    cache, crossing = _isolation_run(geom, planted, scheme, 20000)
    assert cache.eviction_log
    assert crossing == 0


@pytest.mark.slow
def test_colored_workloads_do_not_interfere_at_scale(geom6, scheme6):
    planted = random_table_hash(geom6, range(1 << 10), seed=3)
    cache, crossing = _isolation_run(geom6, planted, scheme6, 500000)
    assert cache.eviction_log
    assert crossing == 0


def test_uncolored_workloads_do_interfere():
    geom = CacheGeometry(64, 4, 512, 2, 30, 1 << 30)
    planted = LinearGF2Hash.from_bits([[15, 17]])
    cache = SlicedCache(geom, planted)
    blocks = [i * 64 for i in range(8192)]
    configs = [WorkloadConfig(blocks[::2], 1, 8000, dirty_writes=True),
               WorkloadConfig(blocks[1::2], 2, 8000, dirty_writes=True)]
    run_workloads(cache, configs)
    owner = {a: i % 2 for i, a in enumerate(blocks)}
    assert cross_partition_evictions(cache.eviction_log, owner) > 0


def test_plan_csv_round_trip():
    plan = {'A': (0, 1, 2), 'B': (3,)}
    buffer = io.StringIO()
    write_plan(plan, buffer)
    assert buffer.getvalue().splitlines() == ['client,color_id', 'A,0', 'A,1', 'A,2', 'B,3']
    buffer.seek(0)
    assert read_plan(buffer) == plan
