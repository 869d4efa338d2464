import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from photosketch.data import PreprocessConfig, load_manifest
from photosketch.synthetic import make_toy_dataset


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """8 train + 4 test identities at 64px, shared across the session."""
    root = tmp_path_factory.mktemp("toy_data")
    manifest_path = make_toy_dataset(root, num_train=8, num_test=4, size=64, seed=0)
    return manifest_path


@pytest.fixture(scope="session")
def toy_manifest(toy_dataset):
    return load_manifest(toy_dataset)


@pytest.fixture(scope="session")
def preprocess64():
    return PreprocessConfig(target_size=64, flip_probability=0.5)
