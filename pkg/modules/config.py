"""
Run configuration.

One JSON file describes a run. Every section is checked by its own
``clean_*`` function, which raises ConfigError naming the offending field.
Integers may be written as numbers or as strings ("0x4000", "131072").
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import pandas as pd

import settings
from core_model import (
    PRESET_GEOMETRIES,
    CacheGeometry,
    FourCoreFormulaHash,
    GlobalTableHash,
    LatencyModel,
    LinearGF2Hash,
    per_set_index_hash,
    random_table_hash,
)
from errors import ArgumentError, ConfigError, GeometryError
from reference_tables import REFERENCE_TABLES, read_slice_table
from simulator import (
    ReplacementPolicy,
    a2_range_addresses,
    bit_combination_addresses,
    stride_addresses,
)

logger = logging.getLogger(__name__)

HASH_VARIANTS = ('linear', 'four_core', 'global_table', 'per_set_index')


def _int(value, name):
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise ConfigError(f"{name} must be an integer, got {value!r}")


def _float(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    return float(value)


def _section(data, name, required=True):
    section = data.get(name)
    if section is None:
        if required:
            raise ConfigError(f"missing section '{name}'")
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"section '{name}' must be an object")
    return section


@dataclass
class AddressSet:
    set_index: Optional[int]
    addresses: List[int]


@dataclass
class WorkloadSpec:
    address_sets: List[AddressSet]
    laps: int = settings.SLICECRACK_DEFAULT_LAPS
    dirty_writes: bool = True
    idle_gap: int = settings.SLICECRACK_DEFAULT_IDLE_GAP
    policy: ReplacementPolicy = ReplacementPolicy.LRU_MRU_INSERT
    shuffle_seed: int = 0
    trace_warmup: bool = False
    reshuffle_laps: bool = False

    @property
    def all_addresses(self):
        return [a for address_set in self.address_sets for a in address_set.addresses]


@dataclass
class ProbeSettings:
    repeats: int = settings.SLICECRACK_DEFAULT_PROBE_REPEATS
    threshold: Optional[float] = None
    pool_set_index: int = 0
    pool_a2_start: int = 0
    pool_count: int = 0


@dataclass
class PartitionSettings:
    page_size: int = settings.SLICECRACK_DEFAULT_PAGE_SIZE
    demands: Dict[str, int] = field(default_factory=dict)
    sample_size: int = 100000


@dataclass
class StrideScanSettings:
    strides: List[int] = field(default_factory=lambda: list(settings.SLICECRACK_DEFAULT_STRIDES))
    max_blocks: int = 1 << 20


@dataclass
class RunConfig:
    geom: CacheGeometry
    planted_hash: object
    hash_section: dict
    workload: WorkloadSpec
    latency: LatencyModel
    probe: ProbeSettings
    partition: PartitionSettings
    stride_scan: StrideScanSettings
    seed: int
    output_dir: str
    source: Optional[str] = None


def clean_geometry(section):
    """Geometry from a preset name or explicit fields."""
    if 'preset' in section:
        name = section['preset']
        if name not in PRESET_GEOMETRIES:
            raise ConfigError(f"unknown geometry preset {name!r}; choose from {sorted(PRESET_GEOMETRIES)}")
        return PRESET_GEOMETRIES[name]
    fields = ('line_size', 'associativity', 'sets_per_slice', 'slices', 'addr_bits', 'memory')
    missing = [f for f in fields if f not in section]
    if missing:
        raise ConfigError(f"geometry is missing {', '.join(missing)}")
    values = [_int(section[f], f'geometry.{f}') for f in fields]
    try:
        return CacheGeometry(*values)
    except GeometryError as exc:
        raise ConfigError(f"geometry: {exc}") from None


def clean_hash(section, geom, base_dir='.'):
    """Planted slice hash from its payload."""
    variant = section.get('variant')
    if variant not in HASH_VARIANTS:
        raise ConfigError(f"hash.variant must be one of {HASH_VARIANTS}, got {variant!r}")
    try:
        planted = _build_hash(section, geom, base_dir)
        planted.validate(geom)
    except (ArgumentError, GeometryError) as exc:
        raise ConfigError(f"hash: {exc}") from None
    return planted


def _build_hash(section, geom, base_dir):
    variant = section['variant']
    if variant == 'linear':
        masks = section.get('masks')
        if not isinstance(masks, list) or not all(isinstance(m, list) for m in masks):
            raise ConfigError("hash.masks must be a list of bit-position lists")
        bit_lists = [[_int(b, 'hash.masks') for b in bits] for bits in masks]
        affine = [_int(b, 'hash.affine') for b in section.get('affine', [0] * len(masks))]
        return LinearGF2Hash.from_bits(bit_lists, affine)

    if variant == 'four_core':
        return FourCoreFormulaHash()

    if variant == 'global_table':
        if 'reference' in section:
            name = section['reference']
            if name not in REFERENCE_TABLES:
                raise ConfigError(f"unknown reference table {name!r}; choose from {sorted(REFERENCE_TABLES)}")
            return REFERENCE_TABLES[name]()
        if 'random' in section:
            params = section['random']
            start = _int(params.get('a2_start', 0), 'hash.random.a2_start')
            count = _int(params.get('count', 0), 'hash.random.count')
            seed = _int(params.get('seed', 0), 'hash.random.seed')
            return random_table_hash(geom, range(start, start + count), seed)
        if 'table' in section:
            return _load_table(section, base_dir)
        raise ConfigError("global_table hash needs 'reference', 'random' or 'table'")

    # per_set_index
    if 'table' in section:
        return _load_table(section, base_dir)
    base_section = section.get('base')
    if not isinstance(base_section, dict) or base_section.get('variant') == 'per_set_index':
        raise ConfigError("per_set_index hash needs a non-nested 'base' hash")
    base = _build_hash(base_section, geom, base_dir)
    feeding = [_int(m, 'hash.feeding_masks') for m in section.get('feeding_masks', [])]
    start = _int(section.get('a2_start', 0), 'hash.a2_start')
    count = _int(section.get('count', 0), 'hash.count')
    if count < 1:
        raise ConfigError("hash.count must be positive")
    return per_set_index_hash(base, geom, range(start, start + count), feeding)


def _load_table(section, base_dir):
    """Table hash from ``section['table']``, a CSV path relative to the config."""
    path = os.path.join(base_dir, section['table'])
    try:
        loaded = read_slice_table(path)
    except FileNotFoundError:
        raise ConfigError(f"hash.table: no such file {path}") from None
    except ValueError as exc:
        raise ConfigError(f"hash.table {path}: {exc}") from None
    if loaded.variant != section['variant']:
        raise ConfigError(
            f"hash.table {path} holds a {loaded.variant} table but hash.variant is {section['variant']}"
        )
    return loaded


def _set_indexes(value, geom, name):
    if isinstance(value, dict):
        start = _int(value.get('start', 0), f'{name}.start')
        count = _int(value.get('count', 1), f'{name}.count')
        indexes = list(range(start, start + count))
    elif isinstance(value, list):
        indexes = [_int(v, name) for v in value]
    else:
        indexes = [_int(value, name)]
    bad = [s for s in indexes if not 0 <= s < geom.sets_per_slice]
    if bad:
        raise ConfigError(f"{name}: set index {bad[0]} outside 0..{geom.sets_per_slice - 1}")
    return indexes


def clean_workload(section, geom, seed):
    """Address generator plus pointer-chase options."""
    generators = [k for k in ('addresses', 'stride', 'bits', 'a2_range') if k in section]
    if len(generators) != 1:
        raise ConfigError("workload needs exactly one of addresses, stride, bits, a2_range")
    kind = generators[0]
    params = section[kind]
    try:
        if kind == 'addresses':
            address_sets = [AddressSet(None, [_int(a, 'workload.addresses') for a in params])]
        elif kind == 'stride':
            address_sets = [AddressSet(None, stride_addresses(
                _int(params.get('base', 0), 'workload.stride.base'),
                _int(params['stride'], 'workload.stride.stride'),
                _int(params['count'], 'workload.stride.count'),
            ))]
        elif kind == 'bits':
            address_sets = [AddressSet(None, bit_combination_addresses(
                _int(params.get('base', 0), 'workload.bits.base'),
                [_int(b, 'workload.bits.bits') for b in params['bits']],
            ))]
        else:
            start = _int(params['a2_start'], 'workload.a2_range.a2_start')
            count = _int(params['count'], 'workload.a2_range.count')
            indexes = _set_indexes(params.get('set_indexes', 0), geom, 'workload.a2_range.set_indexes')
            address_sets = [
                AddressSet(s, a2_range_addresses(geom, s, start, count)) for s in indexes
            ]
    except KeyError as exc:
        raise ConfigError(f"workload.{kind} is missing {exc}") from None
    except ArgumentError as exc:
        raise ConfigError(f"workload: {exc}") from None

    policy = section.get('policy', ReplacementPolicy.LRU_MRU_INSERT.value)
    try:
        policy = ReplacementPolicy(policy)
    except ValueError:
        raise ConfigError(f"workload.policy must be one of {[p.value for p in ReplacementPolicy]}") from None

    laps = _int(section.get('laps', settings.SLICECRACK_DEFAULT_LAPS), 'workload.laps')
    idle_gap = _int(section.get('idle_gap', settings.SLICECRACK_DEFAULT_IDLE_GAP), 'workload.idle_gap')
    if laps < 1:
        raise ConfigError("workload.laps must be positive")
    if idle_gap < 0:
        raise ConfigError("workload.idle_gap must be non-negative")
    return WorkloadSpec(
        address_sets=address_sets,
        laps=laps,
        dirty_writes=bool(section.get('dirty_writes', True)),
        idle_gap=idle_gap,
        policy=policy,
        shuffle_seed=_int(section.get('shuffle_seed', seed), 'workload.shuffle_seed'),
        trace_warmup=bool(section.get('trace_warmup', False)),
        reshuffle_laps=bool(section.get('reshuffle_laps', False)),
    )


def clean_latency(section, seed, noise=None):
    """Latency model; ``noise`` (a fraction of L_memory) overrides the file."""
    l_llc = _float(section.get('l_llc', settings.SLICECRACK_DEFAULT_L_LLC), 'latency.l_llc')
    l_memory = _float(section.get('l_memory', settings.SLICECRACK_DEFAULT_L_MEMORY), 'latency.l_memory')
    if noise is not None:
        noise_stddev = noise * l_memory
    else:
        noise_stddev = _float(section.get('noise_stddev', 0.0), 'latency.noise_stddev')
    try:
        return LatencyModel(l_llc, l_memory, noise_stddev, seed)
    except ArgumentError as exc:
        raise ConfigError(f"latency: {exc}") from None


def clean_probe(section, workload):
    repeats = _int(section.get('repeats', settings.SLICECRACK_DEFAULT_PROBE_REPEATS), 'probe.repeats')
    if repeats < 1:
        raise ConfigError("probe.repeats must be positive")
    threshold = section.get('threshold')
    if threshold is not None:
        threshold = _float(threshold, 'probe.threshold')

    pool = section.get('pool', {})
    first = workload.address_sets[0] if workload.address_sets else None
    default_set = first.set_index if first and first.set_index is not None else 0
    return ProbeSettings(
        repeats=repeats,
        threshold=threshold,
        pool_set_index=_int(pool.get('set_index', default_set), 'probe.pool.set_index'),
        pool_a2_start=_int(pool.get('a2_start', 0), 'probe.pool.a2_start'),
        pool_count=_int(pool.get('count', 0), 'probe.pool.count'),
    )


def clean_partition(section):
    page_size = _int(section.get('page_size', settings.SLICECRACK_DEFAULT_PAGE_SIZE), 'partition.page_size')
    demands = section.get('demands', {})
    if not isinstance(demands, dict):
        raise ConfigError("partition.demands must map client names to color quotas")
    cleaned = {str(client): _int(quota, f'partition.demands.{client}') for client, quota in demands.items()}
    sample_size = _int(section.get('sample_size', 100000), 'partition.sample_size')
    return PartitionSettings(page_size, cleaned, sample_size)


def clean_stride_scan(section):
    strides = [_int(s, 'stride_scan.strides') for s in section.get('strides', settings.SLICECRACK_DEFAULT_STRIDES)]
    if not strides:
        raise ConfigError("stride_scan.strides is empty")
    max_blocks = _int(section.get('max_blocks', 1 << 20), 'stride_scan.max_blocks')
    return StrideScanSettings(strides, max_blocks)


def clean_seed(data, override=None):
    seed = override if override is not None else data.get('seed')
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    return _int(seed, 'seed')


def load_config(path, seed=None, noise=None, output_dir=None):
    """
    Read and validate a run config.

    Parameters:
    -----------
    path : str
        JSON config file
    seed, noise, output_dir : optional
        Command-line overrides
    """
    try:
        with open(path) as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(data, seed, noise, output_dir, base_dir=os.path.dirname(path), source=path)


def config_from_dict(data, seed=None, noise=None, output_dir=None, base_dir='.', source=None):
    run_seed = clean_seed(data, seed)
    geom = clean_geometry(_section(data, 'geometry'))
    hash_section = _section(data, 'hash')
    planted = clean_hash(hash_section, geom, base_dir)
    workload = clean_workload(_section(data, 'workload'), geom, run_seed)
    config = RunConfig(
        geom=geom,
        planted_hash=planted,
        hash_section=hash_section,
        workload=workload,
        latency=clean_latency(_section(data, 'latency', required=False), run_seed, noise),
        probe=clean_probe(_section(data, 'probe', required=False), workload),
        partition=clean_partition(_section(data, 'partition', required=False)),
        stride_scan=clean_stride_scan(_section(data, 'stride_scan', required=False)),
        seed=run_seed,
        output_dir=output_dir or data.get('output_dir') or settings.OUTPUT_DIR,
        source=source,
    )
    logger.debug("loaded config %s: %s, %s hash", source, geom, planted.variant)
    return config
