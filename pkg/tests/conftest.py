import numpy as np
import pytest
import torch

from mariseg.data import load_dataset, synth_generate


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "data"
    synth_generate(seed=123, count=8, height=64, width=64, out_dir=root)
    return root


@pytest.fixture(scope="session")
def synth_samples(synth_root):
    return load_dataset(synth_root)
