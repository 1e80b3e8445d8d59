import sys
from pathlib import Path

import pytest
import torch

from recevo.dataset import apply_five_core, leave_last_out_split, save_prepared
from recevo.synthetic import block_dataset, markov_sequence_dataset

torch.set_num_threads(1)
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def block_split():
    return leave_last_out_split(apply_five_core(block_dataset()), seed=0)


@pytest.fixture(scope="session")
def block_data_dir(tmp_path_factory, block_split):
    return save_prepared(block_split, tmp_path_factory.mktemp("block") / "data")


@pytest.fixture(scope="session")
def markov_split():
    d = markov_sequence_dataset(n_users=120, n_items=60, length=12, follow_prob=0.8, seed=1)
    return leave_last_out_split(apply_five_core(d), seed=0)


@pytest.fixture(scope="session")
def markov_data_dir(tmp_path_factory, markov_split):
    return save_prepared(markov_split, tmp_path_factory.mktemp("markov") / "data")
