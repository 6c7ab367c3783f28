from pathlib import Path

import pytest

from hiera2a import load_params, load_topology

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def cluster_4x8():
    """The shipped 4-node x 8-GPU topology and its measured cost parameters."""
    topo = load_topology(CONFIG_DIR / "topology_4x8.json")
    params = load_params(CONFIG_DIR / "params_4x8.json", topo.num_levels)
    return topo, params


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR
