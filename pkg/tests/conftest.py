import numpy as np
import pytest
import torch

from hkdsearch.data import SynthConfig, synth_generate


def pytest_addoption(parser):
    parser.addoption("--g2aps", default=None, help="Directory with G2APS train.jsonl / test.jsonl.")


@pytest.fixture(scope="session")
def synth_pair():
    return synth_generate(SynthConfig(seed=1, num_ids=8))


@pytest.fixture(scope="session")
def mixed_pair():
    cfg = SynthConfig(seed=3, num_ids=8, altitude_buckets=("20-30m", "30-40m", "40-50m"), images_per_view=72)
    return synth_generate(cfg)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
