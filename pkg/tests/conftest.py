import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ri3d.rangeimage import make_range_image


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_range_image(rng, h=8, w=8, d=4, valid_fraction=0.7):
    """Random image with a random validity mask and plausible coords."""
    mask = rng.uniform(size=(h, w)) < valid_fraction
    theta = np.linspace(0.15, -0.15, h)[:, None] * np.ones((1, w))
    phi = np.ones((h, 1)) * np.linspace(-0.5, 0.5, w)[None, :]
    r = rng.uniform(2.0, 30.0, size=(h, w))
    coords = np.stack([theta, phi, r], axis=-1)
    feats = rng.normal(size=(h, w, d))
    return make_range_image(coords, feats, mask)
