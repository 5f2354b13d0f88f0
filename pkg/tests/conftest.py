import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, size=64, min_side=3):
    """(n, 4) random valid corner-form boxes inside a size x size canvas."""
    x1 = rng.uniform(0, size - min_side - 1, n)
    y1 = rng.uniform(0, size - min_side - 1, n)
    w = rng.uniform(min_side, size - x1 - 1)
    h = rng.uniform(min_side, size - y1 - 1)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


@pytest.fixture(scope="session")
def tiny_dataset():
    from wsis.synthdata import SynthConfig, ProposalConfig, generate_dataset, generate_proposals
    sc = SynthConfig(num_classes=3, image_size=64)
    pc = ProposalConfig(max_proposals=64, min_proposals=50)
    samples = generate_dataset(sc, seed=77, num_images=4)
    proposals = {s.image_id: generate_proposals(s, pc, seed=77) for s in samples}
    return samples, proposals
