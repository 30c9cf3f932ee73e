"""Query plan trees: data model, binarization and vectorization.

Plan trees come out of an optimizer with arbitrary arity (aggregates and
sorts have one child, multi-unions have many).  Tree convolution wants
strictly binary trees, so ``binarize`` pads single children with a NULL
right sibling and splits wide nodes into a left-deep chain.  ``vectorize``
then turns every node into a fixed-width feature vector::

    [ one-hot operator (V) | log1p(card) | log1p(cost) | cache fraction ]
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

NULL_OP = 0


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class PlanNode:
    op: int
    card: float = 0.0
    cost: float = 0.0
    cache: float | None = None
    children: tuple[PlanNode, ...] = ()

    def __post_init__(self):
        if self.op < 0:
            raise PlanError(f"operator id must be non-negative, got {self.op}")
        if not (self.card >= 0) or not (self.cost >= 0):
            raise PlanError(f"card/cost must be non-negative, got {self.card}/{self.cost}")
        if self.cache is not None and not 0.0 <= self.cache <= 1.0:
            raise PlanError(f"cache fraction must lie in [0, 1], got {self.cache}")
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_null(self) -> bool:
        return self.op == NULL_OP

    def walk(self) -> Iterator[PlanNode]:
        """Pre-order traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "card": self.card,
            "cost": self.cost,
            "cache": self.cache,
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PlanNode:
        try:
            return cls(
                op=int(d["op"]),
                card=float(d.get("card", 0.0)),
                cost=float(d.get("cost", 0.0)),
                cache=None if d.get("cache") is None else float(d["cache"]),
                children=tuple(cls.from_dict(c) for c in d.get("children", ())),
            )
        except (KeyError, TypeError) as exc:
            raise PlanError(f"malformed plan node: {exc}") from exc


NULL_NODE = PlanNode(NULL_OP)


@dataclass(frozen=True)
class PlanTree:
    root: PlanNode
    binarized: bool = False

    def nodes(self) -> Iterator[PlanNode]:
        return self.root.walk()

    def to_dict(self) -> dict:
        return self.root.to_dict()

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> PlanTree:
        root = PlanNode.from_dict(d)
        return cls(root, binarized=is_binary(root))

    @classmethod
    def from_json(cls, text: str) -> PlanTree:
        return cls.from_dict(json.loads(text))


def is_binary(node: PlanNode) -> bool:
    return all(len(n.children) in (0, 2) for n in node.walk())


def _binarize_node(node: PlanNode) -> PlanNode:
    kids = [_binarize_node(c) for c in node.children]
    if len(kids) == 0:
        return node
    if len(kids) == 1:
        return PlanNode(node.op, node.card, node.cost, node.cache, (kids[0], NULL_NODE))
    if len(kids) == 2:
        return PlanNode(node.op, node.card, node.cost, node.cache, tuple(kids))
    # c children -> c-1 binary copies, left-deep; the outermost copy is the original
    acc = kids[0]
    for kid in kids[1:]:
        acc = PlanNode(node.op, node.card, node.cost, node.cache, (acc, kid))
    return acc


def binarize(tree: PlanTree) -> PlanTree:
    """Rewrite ``tree`` so every node has zero or two children."""
    return PlanTree(_binarize_node(tree.root), binarized=True)


@dataclass(frozen=True)
class FeatureConfig:
    """Layout of node feature vectors.

    ``vocab_size`` counts the NULL operator, so real operators use ids
    ``1 .. vocab_size - 1``.  With ``use_cache=False`` the cache slot is
    still present but always zero (cold-cache mode).
    """

    vocab_size: int
    use_cache: bool = True

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least NULL plus one operator")

    @property
    def width(self) -> int:
        return self.vocab_size + 3


@dataclass(frozen=True, eq=False)
class VectorNode:
    features: np.ndarray
    left: VectorNode | None = None
    right: VectorNode | None = None

    def walk(self) -> Iterator[VectorNode]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if node.right is not None:
                stack.append(node.right)
            if node.left is not None:
                stack.append(node.left)


@dataclass(frozen=True, eq=False)
class FlatTree:
    """Pre-order array form of a vector tree; ``-1`` marks an absent child."""

    features: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @cached_property
    def key(self) -> bytes:
        return self.features.tobytes() + self.left.tobytes() + self.right.tobytes()


@dataclass(frozen=True, eq=False)
class VectorTree:
    root: VectorNode
    node_count: int = field(default=0)

    def __post_init__(self):
        n = sum(1 for _ in self.root.walk())
        if self.node_count == 0:
            object.__setattr__(self, "node_count", n)
        elif self.node_count != n:
            raise PlanError(f"node_count {self.node_count} != reachable nodes {n}")

    @property
    def width(self) -> int:
        return self.root.features.shape[0]

    @cached_property
    def flat(self) -> FlatTree:
        feats, left, right = [], [], []

        def visit(node: VectorNode) -> int:
            idx = len(feats)
            feats.append(node.features)
            left.append(-1)
            right.append(-1)
            if node.left is not None:
                left[idx] = visit(node.left)
            if node.right is not None:
                right[idx] = visit(node.right)
            return idx

        visit(self.root)
        return FlatTree(
            np.asarray(feats, dtype=np.float64),
            np.asarray(left, dtype=np.int64),
            np.asarray(right, dtype=np.int64),
        )

    def same_as(self, other: VectorTree) -> bool:
        return self.flat.key == other.flat.key


def vectorize(tree: PlanTree, config: FeatureConfig) -> VectorTree:
    """Encode a binarized plan tree as a tree of feature vectors."""
    if not is_binary(tree.root):
        raise PlanError("vectorize needs a binarized plan tree")
    V = config.vocab_size

    def encode(node: PlanNode) -> VectorNode:
        vec = np.zeros(config.width, dtype=np.float64)
        if node.op >= V:
            raise PlanError(f"operator id {node.op} outside vocabulary of size {V}")
        if not node.is_null:
            vec[node.op] = 1.0
            vec[V] = math.log1p(node.card)
            vec[V + 1] = math.log1p(node.cost)
            if config.use_cache and node.cache is not None:
                vec[V + 2] = node.cache
        if node.children:
            left, right = node.children
            return VectorNode(vec, encode(left), encode(right))
        return VectorNode(vec)

    return VectorTree(encode(tree.root))


def count_nodes(tree: VectorTree) -> int:
    return sum(1 for _ in tree.root.walk())


def featurize(tree: PlanTree, config: FeatureConfig) -> VectorTree:
    """``vectorize(binarize(tree))``."""
    return vectorize(binarize(tree), config)
