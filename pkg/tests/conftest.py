import numpy as np
import pytest

from todnet.core_types import EmbeddingDataset, EmbeddingRecord, Modality, Split
from todnet.flow import init_flow


def make_dataset(groups, d=4, captions=2, seed=0, split=Split.TEST, start_id=0):
    """Random unit-vector dataset; ids sequential, image first in each group."""
    rng = np.random.default_rng(seed)
    records = []
    eid = start_id
    for g in range(groups):
        for j in range(captions + 1):
            v = rng.standard_normal(d)
            records.append(EmbeddingRecord(eid, Modality.IMAGE if j == 0 else Modality.CAPTION, g, v / np.linalg.norm(v)))
            eid += 1
    return EmbeddingDataset(d, tuple(records), split)


@pytest.fixture
def small_dataset():
    return make_dataset(6, d=4, captions=2, seed=3)


@pytest.fixture
def random_flow():
    return init_flow(4, n_layers=3, n_hidden_layers=2, hidden_units=8, seed=11, output_scale=0.5)
