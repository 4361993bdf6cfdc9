import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from scenes import tiny_dataset  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return tiny_dataset()


@pytest.fixture(scope="session")
def small_dataset_36():
    # 3 train views + 1 holdout at 36x36 for gradient checks
    return tiny_dataset(num_views=4, res=36)
