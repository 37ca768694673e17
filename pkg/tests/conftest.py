import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oodseg.raster import ImageRaster, ObjectCutout, SemanticLabelMap

REPO_ROOT = Path(__file__).resolve().parents[1]
FIXTURE_DIR = REPO_ROOT / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def street_scene():
    """Small synthetic scene: sky (class 10) on top, road (class 0) below."""
    rng = np.random.default_rng(7)
    h, w = 24, 32
    img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    labels = np.full((h, w), 10, dtype=np.uint8)
    labels[h // 2 :, :] = 0
    return ImageRaster(img), SemanticLabelMap(labels)


@pytest.fixture
def square_cutout():
    """6x6 cutout with a solid 4x4 alpha core."""
    rng = np.random.default_rng(11)
    img = rng.integers(0, 256, size=(6, 6, 3), dtype=np.uint8)
    alpha = np.zeros((6, 6))
    alpha[1:5, 1:5] = 1.0
    return ObjectCutout(image=ImageRaster(img), alpha=alpha, tag="box")
