"""Small helpers shared by the examples."""

import numpy as np


def batches(n, size, seed=0):
    idx = np.random.default_rng(seed).permutation(n)
    return [idx[i : i + size] for i in range(0, n, size)]
