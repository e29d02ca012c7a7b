import numpy as np
import pytest

from gvp_gnn.demos import random_atoms
from gvp_gnn.gnn import GvpGnnModel
from gvp_gnn.models import ModelConfig
from gvp_gnn.mol_graph import AtomRecord, featurize

SMALL_MODEL = {
    "node_scalar": 6,
    "node_vector": 3,
    "num_layers": 2,
    "ff_scalar": 8,
    "ff_vector": 4,
    "head_hidden": 5,
    "dropout_rate": 0.0,
    "vocab": ("C", "N", "O"),
}

WATER_XYZ = """3
water
O 0.0 0.0 0.0
H 0.9572 0.0 0.0
H -0.239987 0.926627 0.0
"""


def small_config(**overrides) -> ModelConfig:
    values = dict(SMALL_MODEL)
    values.update(overrides)
    return ModelConfig(**values)


def random_graph(seed: int, count: int = 8, cutoff: float = 4.5, tag_first: bool = False):
    rng = np.random.default_rng(seed)
    atoms = random_atoms(rng, count)
    if tag_first:
        atoms[0] = AtomRecord(atoms[0].element, atoms[0].position, True)
    cfg = small_config()
    return featurize(atoms, cfg.element_vocab, cutoff, cfg.edge_scalar)


@pytest.fixture
def small_cfg():
    """A narrow two-layer configuration."""
    return small_config()


@pytest.fixture
def small_model(small_cfg):
    """A seeded model with non-trivial norm and bias parameters."""
    model = GvpGnnModel(small_cfg)
    rng = np.random.default_rng(42)
    for name, value in model.params.items():
        if value.ndim == 1:
            model.params[name] = value + rng.uniform(-0.5, 0.5, size=value.shape)
    return model


@pytest.fixture
def graph():
    """A seeded 8-atom structure."""
    return random_graph(3)


@pytest.fixture
def water_xyz(tmp_path):
    path = tmp_path / "water.xyz"
    path.write_text(WATER_XYZ)
    return path


@pytest.fixture
def disable_env_file(mocker):
    """Prevent loading a local .env during tests."""
    mocker.patch("gvp_gnn.config.os.path.exists", return_value=False)


@pytest.fixture
def make_graph():
    """Factory for seeded random structures."""
    return random_graph


@pytest.fixture
def make_config():
    """Factory for narrow configurations with overrides."""
    return small_config
