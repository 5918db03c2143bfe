import json
import logging
from pathlib import Path

import numpy as np
import pytest

from utils.config import load_config

FIXTURES = Path(__file__).resolve().parent / "fixtures"

# 16×16 BEV cells, 8×16 image, two boxes per scene: small enough for a few
# epochs inside a unit test.
TINY_OVERRIDES = {
    "grid.x_max": 6.4,
    "grid.y_min": -3.2,
    "grid.y_max": 3.2,
    "grid.channels": 4,
    "camera.image_rows": 8,
    "camera.image_cols": 16,
    "camera.fx": 8.0,
    "camera.fy": 8.0,
    "camera.cx": 8.0,
    "camera.cy": 3.0,
    "camera.depth_bins": 8,
    "camera.d_max": 12.8,
    "fuser.heads": 2,
    "fuser.points": 2,
    "fuser.blocks_per_scale": 1,
    "scenes.counts": {"car": 1, "pedestrian": 1, "cyclist": 0},
    "train.epochs": 2,
    "train.scenes": 3,
    "train.test_scenes": 2,
}


def philox(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))


@pytest.fixture
def rng():
    return philox(1234)


@pytest.fixture
def tiny_config():
    return load_config(overrides=TINY_OVERRIDES)


@pytest.fixture
def eval_sheet():
    return json.loads((FIXTURES / "eval_sheet.json").read_text())


@pytest.fixture
def zfusion_log(caplog):
    """caplog wired to the project logger, which does not propagate to root."""
    logger = logging.getLogger("zfusion")
    logger.addHandler(caplog.handler)
    caplog.set_level(logging.DEBUG, logger="zfusion")
    yield caplog
    logger.removeHandler(caplog.handler)
