import numpy as np
import pytest

from voxequiv.mol_io import SyntheticSpec, gen_synthetic_dataset
from voxequiv.tinynet import NetConfig, init_net
from voxequiv.voxelizer import GridSpec


@pytest.fixture(scope="session")
def small_spec():
    """16^3 grid at 0.5 A with two channels; extent limit 2.5 A."""
    return GridSpec(16, 0.5, ("C", "O"), 0.5)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(n_molecules=12, atoms_min=2, atoms_max=4, bond_length=1.3, jitter=0.05,
                         elements=("C", "O"))
    return gen_synthetic_dataset(spec, 0)


@pytest.fixture(scope="session")
def tiny_net():
    return init_net(NetConfig(widths=(2, 4, 8), dropout=0.0), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

