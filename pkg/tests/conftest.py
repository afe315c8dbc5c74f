import numpy as np
import pytest

from icczone.acoustics import default_geometry
from icczone.experiment import calibrate, load_config, make_scene, make_source
from icczone.stft import StftConfig


@pytest.fixture(scope="session")
def cfg_stft():
    return StftConfig()


@pytest.fixture(scope="session")
def geometry():
    return default_geometry()


@pytest.fixture(scope="session")
def default_setup():
    """Default image-source scene, 8 s speech-shaped source and its calibration."""
    cfg = load_config()
    scene = make_scene(cfg)
    source = make_source(cfg)
    cal = calibrate(cfg, scene, source)
    return cfg, scene, source, cal


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
