import numpy as np
import pytest

from plntree.hierarchy import TreeLayout

# worked-example hierarchy without its root: 2 -> 5 -> 10
EXAMPLE_PARENTS = [[0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2, 3, 4, 4, 4]]
EXAMPLE_LAYERS = [[72, 75], [12, 60, 42, 13, 20], [3, 9, 60, 0, 12, 30, 13, 8, 0, 12]]


@pytest.fixture
def example_tree():
    return TreeLayout([2, 5, 10], EXAMPLE_PARENTS)


@pytest.fixture
def example_rooted_tree():
    return TreeLayout([1, 2, 5, 10], [[0, 0]] + EXAMPLE_PARENTS)


@pytest.fixture(scope="session")
def toy_tree():
    # two roots, one with an only child
    return TreeLayout([2, 3], [[0, 0, 1]])


@pytest.fixture
def small_tree():
    return TreeLayout([2, 4, 6], [[0, 0, 1, 1], [0, 0, 1, 2, 3, 3]])


def random_tree(rng, depth=3, max_width=4):
    sizes = [int(rng.integers(1, max_width + 1))]
    parents = []
    for _ in range(depth - 1):
        par = []
        for k in range(sizes[-1]):
            par += [k] * int(rng.integers(1, 4))
        parents.append(par)
        sizes.append(len(par))
    return TreeLayout(sizes, parents)


# verdict lines of the acceptance module, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
