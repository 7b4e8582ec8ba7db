import numpy as np
import pytest
import torch

from steelseg.synthetic import make_records, write_corpus


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Ten synthetic 64x64 images on disk, two of them defect-free."""
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, make_records(10, 64, 64, seed=7, defect_free=2))
    return root


@pytest.fixture
def tiny_config():
    from steelseg.model import ModelConfig

    return ModelConfig(backbone="tiny", aspp_channels=32, decoder_channels=32, low_level_projection=16)
