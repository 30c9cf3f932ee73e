import sys

import numpy as np
import pytest

from hintsteer.plan import PlanNode, PlanTree, VectorNode, VectorTree


def random_plan(rng, max_depth=4, vocab=10, max_arity=4):
    """Arbitrary-arity plan tree with no NULL nodes."""
    def node(depth):
        arity = 0 if depth == 0 else int(rng.integers(0, max_arity + 1))
        kids = tuple(node(depth - 1) for _ in range(arity))
        cache = float(rng.random()) if arity == 0 and rng.random() < 0.5 else None
        return PlanNode(int(rng.integers(1, vocab)), float(rng.uniform(0, 1e6)),
                        float(rng.uniform(0, 1e5)), cache, kids)
    return PlanTree(node(max_depth))


def random_vector_tree(rng, width, max_depth=4, p_leaf=0.3):
    def node(depth):
        x = rng.normal(size=width)
        if depth == 0 or rng.random() < p_leaf:
            return VectorNode(x)
        return VectorNode(x, node(depth - 1), node(depth - 1))
    return VectorTree(node(max_depth))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
