import numpy as np
import pytest

from tsan.losses import sorter_train


@pytest.fixture(scope="session")
def small_sorter():
    """Quickly trained length-8 sorter shared across unit tests."""
    return sorter_train(n=8, n_sequences=6000, seed=11, epochs=3, holdout=500)
