import os

import numpy as np
import pytest

from lesiondet.core.utils.config import RunConfig
from lesiondet.dataset.phantom import PhantomSpec


def pytest_collection_modifyitems(config, items):
    if os.environ.get('LESIONDET_RUN_SLOW') == '1':
        return

    skip = pytest.mark.skip(reason="set LESIONDET_RUN_SLOW=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_phantom() -> PhantomSpec:
    """ 64x64 phantoms at 1 mm with lesions large enough for a small u-net. """
    return PhantomSpec(height=64, width=64, spacing_mm=1.0, diameter_mm=(8.0, 14.0), contrast=(0.4, 0.6),
                       lesions_per_exam=(1, 1), texture_sigma_mm=2.0, texture_amplitude=0.02)


@pytest.fixture(scope='session')
def tiny_config_dict() -> dict:
    """ Small run: depth-2 u-net on 32 px patches of the tiny phantoms. Shared
    across the session, so tests copy it before changing anything.
    """
    return {
        'seed': 7,
        'unet': {'depth': 2, 'base_filters': 4},
        'training': {'batch_size': 4, 'max_epochs': 3, 'patch_px': 32, 'learning_rate': 0.01},
        'preprocessing': {'target_spacing_mm': 1.0, 'band_sigmas_mm': [2.0, 4.0, 8.0]},
        'phantom': {'height': 64, 'width': 64, 'spacing_mm': 1.0, 'diameter_mm': [8.0, 14.0],
                    'contrast': [0.4, 0.6], 'lesions_per_exam': [1, 1], 'texture_sigma_mm': 2.0,
                    'texture_amplitude': 0.02},
    }


@pytest.fixture(scope='session')
def tiny_config(tiny_config_dict) -> RunConfig:
    return RunConfig.from_dict(tiny_config_dict)
