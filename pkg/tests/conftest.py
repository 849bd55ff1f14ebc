import os

# small matmuls everywhere; single-threaded BLAS is faster and bit-stable
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from ratelab.corpus import build_corpus
from ratelab.gcc import GccController
from ratelab.sim import SimConfig, run_session


@pytest.fixture(scope="session")
def small_corpus():
    """12 (trace, rtt) pairs shared by unit-level tests."""
    return build_corpus(12, seed=5)


@pytest.fixture(scope="session")
def gcc_logs(small_corpus):
    logs = []
    for i, (trace, rtt) in enumerate(small_corpus):
        cfg = SimConfig(rtt_ms=rtt, session_seed=100 + i)
        logs.append(run_session(trace, GccController(), cfg))
    return logs
