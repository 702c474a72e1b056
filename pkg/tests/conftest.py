import math
from pathlib import Path

import numpy as np
import pytest

from aberra.lens import Material, Surface, load_lens, make_lens

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def singlet():
    return load_lens(FIXTURES / "singlet.lens.json")


@pytest.fixture
def triplet():
    return load_lens(FIXTURES / "cooke_triplet.lens.json")


@pytest.fixture
def thin_singlet():
    """c1 = 0.01, c2 = 0, n = 1.5 (no dispersion), 1 mm thick."""
    glass = Material("n15", 1.5, math.inf)
    return make_lens(
        [
            Surface(0.01, thickness=1.0, material="n15", semi_aperture=5.0),
            Surface(0.0, thickness=199.0, semi_aperture=5.0),
        ],
        materials=[glass],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def natural():
    """A 256x256 linear-light natural photograph."""
    from skimage import data

    from aberra.degrade import srgb_decode

    return srgb_decode(data.astronaut()[::2, ::2] / 255.0)
