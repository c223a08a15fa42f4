"""
Shared pytest configuration.

Overfit and end-to-end training oracles are marked slow and only run with
--runslow.
"""

import pytest

from extraction.config import BackboneConfig, DetectorConfig, RecognizerConfig, SRConfig, SyntheticSpec
from extraction.core.vocab import ChartType


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow training tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running training oracle')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_backbone():
    """Smallest valid backbone: 32 px input, 8 x 8 first-stage grid."""
    return BackboneConfig(input_size=(32, 32), patch_size=4, embed_dim=8, depths=(2, 2, 2, 2),
                          heads=(1, 1, 2, 2), window_size=4, num_classes=4)


@pytest.fixture
def tiny_detector():
    return DetectorConfig(input_size=(64, 64), grid_sizes=(8,), anchors=(((12, 6), (24, 8)),), channels=8)


@pytest.fixture
def tiny_recognizer():
    return RecognizerConfig(charset='0123456789abc', max_length=6, num_fiducial=6, image_size=(16, 32),
                            hidden_size=16, channels=(4, 8, 8))


@pytest.fixture
def tiny_sr():
    return SRConfig(num_rrdb_blocks=1, growth_channels=4, base_channels=8, native_scale=2,
                    discriminator_channels=4)


@pytest.fixture
def small_spec():
    return SyntheticSpec(chart_types=(ChartType.VERTICAL_BAR, ChartType.HORIZONTAL_BAR, ChartType.LINE,
                                      ChartType.SCATTER), count=8, seed=7)
