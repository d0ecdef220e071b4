"""Run config loading and validation."""

import copy
import json
import os

import pytest

from config import config_from_dict, load_config
from core_model import (
    PRESET_GEOMETRIES,
    CacheGeometry,
    GlobalTableHash,
    LinearGF2Hash,
    PerSetIndexTablesHash,
    per_set_index_hash,
)
from errors import ConfigError
from helpers import CONFIG_DIR
from reference_tables import write_slice_table
from simulator import ReplacementPolicy
from slice_cracker import main

MINIMAL = {
    'seed': 5,
    'geometry': {'preset': '4-slice-10mb'},
    'hash': {'variant': 'linear', 'masks': [[17, 19], [18, 20]]},
    'workload': {'a2_range': {'a2_start': '0x4000', 'count': 64, 'set_indexes': [0, 1]}},
}


def _with(**changes):
    data = copy.deepcopy(MINIMAL)
    for dotted, value in changes.items():
        *path, last = dotted.split('__')
        target = data
        for key in path:
            target = target.setdefault(key, {})
        if value is None:
            target.pop(last, None)
        else:
            target[last] = value
    return data


def test_shipped_configs_load():
    for name in ('four_slice.json', 'six_slice.json', 'toy.json'):
        config = load_config(os.path.join(CONFIG_DIR, name))
        assert config.seed is not None
        assert config.workload.all_addresses


def test_six_slice_config():
    config = load_config(os.path.join(CONFIG_DIR, 'six_slice.json'))
    assert config.geom == PRESET_GEOMETRIES['6-slice-15mb']
    assert isinstance(config.planted_hash, PerSetIndexTablesHash)
    assert len(config.planted_hash.tables) == 32
    assert len(config.workload.address_sets) == 128
    assert config.workload.reshuffle_laps
    assert config.probe.pool_set_index == 1
    assert config.partition.demands == {'A': 16, 'B': 16}


def test_minimal_config_defaults():
    config = config_from_dict(MINIMAL)
    assert isinstance(config.planted_hash, LinearGF2Hash)
    assert [s.set_index for s in config.workload.address_sets] == [0, 1]
    assert config.workload.address_sets[1].addresses[0] == (0x4000 << 17) | (1 << 6)
    assert config.workload.policy is ReplacementPolicy.LRU_MRU_INSERT
    assert config.workload.shuffle_seed == 5
    assert config.workload.dirty_writes
    assert config.latency.l_llc == 40
    assert config.latency.noise_stddev == 0
    assert config.probe.pool_set_index == 0
    assert config.stride_scan.strides[0] == 64


def test_seed_is_required():
    with pytest.raises(ConfigError):
        config_from_dict(_with(seed=None))
    assert config_from_dict(_with(seed=None), seed=9).seed == 9


def test_command_line_overrides():
    config = config_from_dict(MINIMAL, seed=3, noise=0.05, output_dir='elsewhere')
    assert config.seed == 3
    assert config.latency.noise_stddev == pytest.approx(10)
    assert config.latency.rng_seed == 3
    assert config.output_dir == 'elsewhere'


@pytest.mark.parametrize('changes', [
    {'geometry__preset': '8-slice'},
    {'geometry': {'line_size': 64, 'associativity': 20}},
    {'geometry': {'line_size': 64, 'associativity': 20, 'sets_per_slice': 2000, 'slices': 4,
                  'addr_bits': 34, 'memory': 1 << 34}},
    {'hash__variant': 'quantum'},
    {'hash__masks': [[3]]},
    {'hash__masks': 'bits'},
    {'workload__stride': {'stride': 64, 'count': 4}},
    {'workload': {'laps': 3}},
    {'workload__policy': 'fifo'},
    {'workload__laps': 0},
    {'workload__laps': 'many'},
    {'workload__a2_range': {'a2_start': 0, 'count': 4, 'set_indexes': [4096]}},
    {'latency': {'l_llc': 300, 'l_memory': 200}},
    {'probe': {'repeats': 0}},
    {'partition': {'demands': ['A']}},
    {'seed': True},
])
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        config_from_dict(_with(**changes))


def test_generators():
    stride = config_from_dict(_with(workload={'stride': {'base': 0, 'stride': '0x20000', 'count': 3}}))
    assert stride.workload.all_addresses == [0, 0x20000, 0x40000]
    bits = config_from_dict(_with(workload={'bits': {'bits': [17, 19]}}))
    assert bits.workload.all_addresses == [0, 1 << 17, 1 << 19, (1 << 17) | (1 << 19)]
    listed = config_from_dict(_with(workload={'addresses': ['0x40', 128]}))
    assert listed.workload.all_addresses == [0x40, 128]
    ranged = config_from_dict(_with(workload={'a2_range': {
        'a2_start': 0, 'count': 2, 'set_indexes': {'start': 4, 'count': 3}}}))
    assert [s.set_index for s in ranged.workload.address_sets] == [4, 5, 6]


def test_hash_variants(tmp_path):
    four = config_from_dict(_with(hash={'variant': 'four_core'}))
    assert four.planted_hash.variant == 'four_core'
    reference = config_from_dict(_with(hash={'variant': 'global_table', 'reference': 'four_core'}))
    assert len(reference.planted_hash.entries) == 64

    (tmp_path / 'table.csv').write_text('set_index,a2_hex,slice_id\n*,4000,2\n*,4001,3\n')
    data = _with(hash={'variant': 'global_table', 'table': 'table.csv'})
    (tmp_path / 'run.json').write_text(json.dumps(data))
    loaded = load_config(str(tmp_path / 'run.json'))
    assert loaded.planted_hash == GlobalTableHash({0x4000: 2, 0x4001: 3})


SMALL_GEOMETRY = {'line_size': 64, 'associativity': 8, 'sets_per_slice': 4, 'slices': 2,
                  'addr_bits': 30, 'memory': 1 << 30}


def test_per_set_index_table_file(tmp_path):
    geom = CacheGeometry(64, 8, 4, 2, 30, 1 << 30)
    planted = per_set_index_hash(LinearGF2Hash.from_bits([[8, 9]]), geom, range(16), [1])
    write_slice_table(planted, tmp_path / 'tables.csv')
    data = _with(geometry=SMALL_GEOMETRY, hash={'variant': 'per_set_index', 'table': 'tables.csv'})
    (tmp_path / 'run.json').write_text(json.dumps(data))
    loaded = load_config(str(tmp_path / 'run.json')).planted_hash
    assert isinstance(loaded, PerSetIndexTablesHash)
    assert len(loaded.tables) == 2
    for set_index in range(4):
        for a2 in range(16):
            assert loaded.slice_for(a2, set_index, geom) == planted.slice_for(a2, set_index, geom)


@pytest.mark.parametrize('text, variant', [
    ('a2_hex,slice\n4000,2\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n*,zz,1\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n*,4000,\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n*,4000,1\n*,4000,0\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n*,4000,1\n0,4001,0\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n*,4000,9\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n0,4000,1\n', 'global_table'),
    ('set_index,a2_hex,slice_id\n*,4000,1\n', 'per_set_index'),
    ('set_index,a2_hex,slice_id\n0,4000,1\n', 'per_set_index'),
])
def test_bad_table_file_is_config_error(tmp_path, text, variant):
    (tmp_path / 'table.csv').write_text(text)
    data = _with(hash={'variant': variant, 'table': 'table.csv'})
    (tmp_path / 'run.json').write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'run.json'))


def test_bad_table_file_exits_with_usage_error(tmp_path, capsys):
    (tmp_path / 'table.csv').write_text('a2_hex,slice\n4000,2\n')
    data = _with(hash={'variant': 'global_table', 'table': 'table.csv'})
    (tmp_path / 'run.json').write_text(json.dumps(data))
    assert main(['crack', '--config', str(tmp_path / 'run.json'), '--out', str(tmp_path)]) == 1
    assert 'Error: hash.table' in capsys.readouterr().out


def test_nested_per_set_index_rejected():
    inner = {'variant': 'per_set_index', 'base': {'variant': 'four_core'}, 'count': 4}
    with pytest.raises(ConfigError):
        config_from_dict(_with(hash={'variant': 'per_set_index', 'base': inner, 'count': 4}))


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"seed": ')
    with pytest.raises(ConfigError):
        load_config(str(broken))
    listed = tmp_path / 'list.json'
    listed.write_text('[]')
    with pytest.raises(ConfigError):
        load_config(str(listed))
