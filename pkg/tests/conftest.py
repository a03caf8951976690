import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from geomfix import ball_mask, blob_mask, cube_mesh, icosphere  # noqa: E402

from mitoforge.mesh import marching_cubes  # noqa: E402


@pytest.fixture(scope="session")
def sphere_mesh():
    return icosphere(radius=0.35, subdivisions=3)


@pytest.fixture(scope="session")
def unit_cube():
    return cube_mesh(side=1.0)


@pytest.fixture(scope="session")
def ball_volume():
    return ball_mask(radius_vox=10, voxel_size=24.0, margin=3)


@pytest.fixture(scope="session")
def ball_mesh(ball_volume):
    return marching_cubes(ball_volume)


@pytest.fixture(scope="session")
def blob_volume():
    return blob_mask(shape=(32, 32, 32), fill=0.22, smooth=2.5, seed=7)


@pytest.fixture(scope="session")
def blob_mesh(blob_volume):
    return marching_cubes(blob_volume)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
