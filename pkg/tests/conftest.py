import itertools

import numpy as np
import pytest

from milcurate.core import Bag, MilProblem
from milcurate.kernels import KernelSpec


def random_problem(rng, pos_sizes=(2, 4), n_pos=2, n_neg=2, neg_size=3, dim=3, delta=0.5, C=1.0,
                   kernel=KernelSpec("linear")):
    bags = []
    for b in range(n_pos):
        m = int(rng.integers(pos_sizes[0], pos_sizes[1] + 1))
        bags.append(Bag.from_array(f"p{b}", "pos", rng.normal(size=(m, dim)) + 1.0))
    for b in range(n_neg):
        bags.append(Bag.from_array(f"n{b}", "neg", rng.normal(size=(neg_size, dim)) - 1.0))
    return MilProblem(bags, delta=delta, C=C, kernel=kernel)


def brute_force_fractional(c, xi, k):
    """Exhaustive max of c'h / xi'h over all k-subsets; first subset wins ties."""
    best, best_set = -np.inf, None
    for S in itertools.combinations(range(len(c)), k):
        S = list(S)
        r = c[S].sum() / xi[S].sum()
        if r > best:
            best, best_set = r, S
    h = np.zeros(len(c), dtype=int)
    h[best_set] = 1
    return h, best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
