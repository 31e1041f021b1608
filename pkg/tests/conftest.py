import os
import sys
from pathlib import Path

# determinism tests compare bits, so BLAS must not split reductions across threads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    from ppmseg.data import make_toy

    d = tmp_path_factory.mktemp("toy")
    make_toy(d, 8, seed=0)
    return d
