import numpy as np
import pytest

from tripletree import (
    ExpectationOracle,
    OracleState,
    generate_random_ultrametric,
    tree_from_topology,
)


@pytest.fixture
def cherry():
    return tree_from_topology(("a", "b"))


@pytest.fixture
def three_leaf():
    return tree_from_topology((("a", "b"), "c"))


@pytest.fixture
def balanced8():
    def nest(labels):
        if len(labels) == 1:
            return labels[0]
        m = len(labels) // 2
        return (nest(labels[:m]), nest(labels[m:]))

    return tree_from_topology(nest([f"t{i}" for i in range(8)]))


@pytest.fixture
def caterpillar6():
    return tree_from_topology(("a", ("b", ("c", ("d", ("e", "f"))))))


def random_tree(n, w=0.02, seed=0):
    return generate_random_ultrametric(n, w, seed=seed)


def noiseless_oracle(tree, seed=0):
    return OracleState(tree, "noiseless", seed=seed)


def sampled_oracle(tree, seed=0):
    return OracleState(tree, "homogeneous", seed=seed)


def expectation_oracle(tree):
    return ExpectationOracle(tree, "homogeneous")
