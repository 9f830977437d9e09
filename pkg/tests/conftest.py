import numpy as np
import pytest
import torch

from vlur.classifier import SceneClassifier, StubBackend
from vlur.data import build_synthetic_dataset, generate_clean_images


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """22 pairs (2 per type) of 32px procedural scenes."""
    root = tmp_path_factory.mktemp("tiny")
    clean = generate_clean_images(root / "clean", 4, size=32, seed=0)
    return build_synthetic_dataset(None, root / "ds", 2, seed=5, split="test", clean_files=clean)


@pytest.fixture(scope="session")
def stub_classifier():
    return SceneClassifier(StubBackend(0)).freeze()
