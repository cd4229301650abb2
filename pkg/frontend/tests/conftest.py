import os

import pytest

_DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def run_dirs():
    # three short real training runs; only their metrics.csv files are kept
    names = ("socm_seed0", "socm_seed1", "socm_id_seed0")
    return {n: os.path.join(_DATA, n) for n in names}
