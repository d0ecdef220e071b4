import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'modules'))

from core_model import PRESET_GEOMETRIES, CacheGeometry, LatencyModel, LinearGF2Hash  # noqa: E402


@pytest.fixture
def geom4():
    return PRESET_GEOMETRIES['4-slice-10mb']


@pytest.fixture
def geom6():
    return PRESET_GEOMETRIES['6-slice-15mb']


@pytest.fixture
def small_geom():
    """4 slices, 8 ways, 16 sets; A2 starts at bit 10."""
    return CacheGeometry(64, 8, 16, 4, 30, 1 << 30)


@pytest.fixture
def model():
    return LatencyModel(40, 200)


@pytest.fixture
def linear4():
    """Two-bit linear hash over A2 bits 0..3 of the 4-slice preset."""
    return LinearGF2Hash.from_bits([[17, 19], [18, 20]])
