import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import transfer_matrix_covariance  # noqa: E402

from optpred.lattice import CovarianceProfile, gaussianized_prior  # noqa: E402


@pytest.fixture(scope="session")
def exact_profile():
    """Quartic-lattice covariance from the transfer-matrix oracle (n = 16)."""
    c = transfer_matrix_covariance()
    return CovarianceProfile(c, np.zeros_like(c), {"source": "transfer matrix"})


@pytest.fixture(scope="session")
def exact_prior(exact_profile):
    return gaussianized_prior(exact_profile)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
