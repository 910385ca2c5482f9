"""Seeded replicate streams and an order-preserving replicate runner."""
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

SEED_ENV = "SMARTLAB_SEED"


def replicate_rng(master_seed, *keys):
    """Independent generator for the replicate identified by ``keys``.

    Streams depend only on (master_seed, keys), never on scheduling order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


def resolve_seed(seed):
    """Explicit seed, else the environment override, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def run_tasks(fn, tasks, threads=1, chunksize=8):
    """``[fn(t) for t in tasks]``, optionally across worker processes.

    Results come back in task order, so aggregation is the same however
    the work was scheduled.
    """
    tasks = list(tasks)
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=chunksize))
