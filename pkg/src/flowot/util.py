"""Small shared helpers: named RNG streams and BLAS thread pinning."""

from contextlib import contextmanager

import numpy as np
from threadpoolctl import threadpool_limits

# Named sub-streams derived from one experiment seed, so that each stage
# (data generation, parameter init, the training loop, evaluation) can be
# re-run in isolation without disturbing the others.
DATASET_STREAM = 0
INIT_STREAM = 1
TRAIN_STREAM = 2
EVAL_STREAM = 3


def named_rng(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named sub-stream of a root seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def derive_seed(seed: int, stream: int) -> int:
    """Stable integer sub-seed of a root seed."""
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)).generate_state(1)[0])


@contextmanager
def single_thread_blas():
    """Pin BLAS pools to one thread.

    The matrices in this package are small ([batch, 64] against [64, 64]);
    on the target machines threaded GEMM dispatch costs far more than it
    saves, and a fixed thread count keeps results bit-reproducible.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        yield


def chunks(n: int, size: int):
    """Yield (start, stop) index pairs covering range(n) in blocks."""
    for start in range(0, n, size):
        yield start, min(start + size, n)
