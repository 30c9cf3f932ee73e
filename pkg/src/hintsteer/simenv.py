"""Simulated optimizer + execution engine.

A hint set restricts which join and scan operators the optimizer may use.
For each query the simulated optimizer runs a left-deep dynamic program
over the query's join graph using *estimated* cardinalities, which carry a
per-template multiplicative error (usually an underestimate, compounding
with every join).  Execution cost is evaluated on the same plan with the
*true* cardinalities, so a hint set that forbids, say, loop joins can win
on templates where the optimizer is fooled into a nested-loop blowup and
lose where the loop join really was the right call.

The family can also carry adversarial arms:

* ``CJ`` - plans built from cross joins; costs exactly 100x the best
  regular arm.
* ``Temp`` - yields the best regular arm's plan until ``switch_time``
  (measured in executed queries), then behaves like ``CJ``.

Adversarial arms are placed *before* the regular hint sets so that, when
Temp's plan coincides with a regular arm's plan, lowest-id tie-breaking
picks Temp.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .plan import FeatureConfig, PlanNode, PlanTree, VectorTree, featurize


class Op(IntEnum):
    NULL = 0
    HASH_JOIN = 1
    MERGE_JOIN = 2
    LOOP_JOIN = 3
    CROSS_JOIN = 4
    SEQ_SCAN = 5
    INDEX_SCAN = 6
    INDEX_ONLY_SCAN = 7
    SORT = 8
    AGGREGATE = 9


VOCAB_SIZE = len(Op)
JOIN_OPS = ("hash", "merge", "loop")
SCAN_OPS = ("seq", "index", "index_only")
_JOIN_OP = {"hash": Op.HASH_JOIN, "merge": Op.MERGE_JOIN, "loop": Op.LOOP_JOIN}
_SCAN_OP = {"seq": Op.SEQ_SCAN, "index": Op.INDEX_SCAN, "index_only": Op.INDEX_ONLY_SCAN}
SCAN_OPERATORS = frozenset(_SCAN_OP.values())

DEFAULT_EXCLUDE = (("loop",), ("seq",))
REDUCED_JOINS = (("hash", "merge", "loop"), ("hash", "merge"), ("hash", "loop"))
REDUCED_SCANS = (("seq", "index", "index_only"), ("seq",), ("index", "index_only"))


def feature_config(use_cache: bool = True) -> FeatureConfig:
    return FeatureConfig(VOCAB_SIZE, use_cache=use_cache)


# ---------------------------------------------------------------------------
# hint sets

@dataclass(frozen=True)
class HintSet:
    id: int
    joins: frozenset
    scans: frozenset

    def __post_init__(self):
        if not self.joins or not self.scans:
            raise ValueError("a hint set must enable at least one join and one scan operator")
        if not set(self.joins) <= set(JOIN_OPS) or not set(self.scans) <= set(SCAN_OPS):
            raise ValueError(f"unknown operators in hint set {self.joins} / {self.scans}")

    @property
    def name(self) -> str:
        j = "+".join(o for o in JOIN_OPS if o in self.joins)
        s = "+".join(o for o in SCAN_OPS if o in self.scans)
        return f"{j}|{s}"


@dataclass(frozen=True)
class AdversarialArm:
    id: int
    kind: str                 # "CJ" or "Temp"
    switch_time: int = 0      # Temp only; clock = executed queries

    def __post_init__(self):
        if self.kind not in ("CJ", "Temp"):
            raise ValueError(f"unknown adversarial arm kind {self.kind!r}")

    @property
    def name(self) -> str:
        return self.kind if self.kind == "CJ" else f"Temp@{self.switch_time}"


@dataclass
class FamilyConfig:
    """Which hint sets make up the arm family.

    ``joins``/``scans`` default to every nonempty subset in canonical
    (bitmask) order; the family is their product minus ``exclude``.
    """

    joins: list | None = None
    scans: list | None = None
    exclude: list = field(default_factory=lambda: [list(p) for p in [DEFAULT_EXCLUDE]])
    adversarial: list = field(default_factory=list)

    @classmethod
    def reduced(cls, adversarial=()) -> FamilyConfig:
        return cls(joins=[list(j) for j in REDUCED_JOINS],
                   scans=[list(s) for s in REDUCED_SCANS],
                   exclude=[], adversarial=list(adversarial))


@dataclass
class HintFamily:
    arms: list

    @property
    def size(self) -> int:
        return len(self.arms)

    def regular(self) -> list[HintSet]:
        return [a for a in self.arms if isinstance(a, HintSet)]

    def names(self) -> list[str]:
        return [a.name for a in self.arms]


def nonempty_subsets(universe: Sequence[str]) -> list[frozenset]:
    """All nonempty subsets, ordered by bitmask (bit i <-> universe[i])."""
    return [frozenset(u for i, u in enumerate(universe) if mask >> i & 1)
            for mask in range(1, 2 ** len(universe))]


def make_family(config: FamilyConfig | None = None) -> HintFamily:
    config = config or FamilyConfig()
    joins = ([frozenset(j) for j in config.joins] if config.joins is not None
             else nonempty_subsets(JOIN_OPS))
    scans = ([frozenset(s) for s in config.scans] if config.scans is not None
             else nonempty_subsets(SCAN_OPS))
    excluded = {(frozenset(j), frozenset(s)) for j, s in config.exclude}
    arms: list = []
    for adv in config.adversarial:
        adv = dict(adv)
        arms.append(AdversarialArm(len(arms), adv["kind"], int(adv.get("switch_time", 0))))
    combos = [(j, s) for j in joins for s in scans if (j, s) not in excluded]
    if not combos:
        raise ValueError("family configuration excludes every hint set")
    for j, s in combos:
        arms.append(HintSet(len(arms), j, s))
    return HintFamily(arms)


# ---------------------------------------------------------------------------
# catalog, templates, queries

@dataclass(frozen=True)
class QueryDescriptor:
    query_id: int
    template_id: int
    relations: tuple            # catalog relation ids
    sizes: tuple                # rows per relation
    selectivities: tuple        # true filter selectivity per relation
    edges: tuple                # (i, j, fanout) over positions in `relations`
    filter_errors: tuple        # estimated / true filter selectivity
    edge_errors: tuple          # estimated / true join selectivity
    covered: tuple              # index-only scan is cheap for this relation
    shape_seed: int = 0
    group: int = -1             # workload group, -1 when ungrouped

    def __post_init__(self):
        if not self.relations or any(s <= 0 for s in self.sizes):
            raise ValueError("query needs >= 1 relation with positive size")


@dataclass
class EnvConfig:
    seed: int = 0
    n_relations: int = 12
    min_rows: float = 1e4
    max_rows: float = 1e6
    n_templates: int = 16
    min_relations: int = 2
    max_relations: int = 5
    instances_per_template: int = 125
    grouping: bool = True
    n_groups: int = 8
    noise_sigma: float = 0.1
    cache_decay: float = 0.5
    cold_cache: bool = False
    memory_rows: float = 2e5
    # per-template misestimation regimes, one picked uniformly per template:
    # (log edge-error mean, sd, log filter-error mean, sd)
    error_regimes: tuple = (
        (0.0, 0.3, 0.0, 0.3),     # roughly accurate
        (-5.0, 0.7, 0.0, 0.3),    # join sizes underestimated
        (0.0, 0.3, -5.0, 0.5),    # filters look more selective than they are
        (3.0, 0.5, 0.0, 0.3),     # join sizes overestimated
    )
    fanout_range: tuple = (0.5, 10.0)    # rows matched per join key
    selectivity_range: tuple = (1e-2, 1.0)
    unfiltered_prob: float = 0.4         # chance a relation carries no filter
    family: FamilyConfig = field(default_factory=FamilyConfig)

    def __post_init__(self):
        if isinstance(self.family, dict):
            self.family = FamilyConfig(**self.family)
        self.error_regimes = tuple(tuple(float(x) for x in r) for r in self.error_regimes)
        if not self.error_regimes or any(len(r) != 4 for r in self.error_regimes):
            raise ValueError("error_regimes needs entries of (edge_mu, edge_sd, filter_mu, filter_sd)")
        self.fanout_range = tuple(self.fanout_range)
        self.selectivity_range = tuple(self.selectivity_range)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 < self.cache_decay <= 1:
            raise ValueError("cache_decay must lie in (0, 1]")
        if not 1 <= self.min_relations <= self.max_relations <= self.n_relations:
            raise ValueError("need 1 <= min_relations <= max_relations <= n_relations")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        return cls(**d)

    @classmethod
    def load(cls, path) -> EnvConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Template:
    template_id: int
    relations: tuple
    base_selectivities: tuple
    edges: tuple
    filter_errors: tuple
    edge_errors: tuple
    covered: tuple
    shape_seed: int
    regime: int = 0


def make_catalog(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = math.log(config.min_rows), math.log(config.max_rows)
    return np.round(np.exp(rng.uniform(lo, hi, config.n_relations)))


def make_templates(config: EnvConfig, catalog: np.ndarray,
                   rng: np.random.Generator) -> list[Template]:
    templates = []
    for t in range(config.n_templates):
        shape_seed = int(rng.integers(2 ** 31))
        srng = np.random.default_rng(shape_seed)
        m = int(srng.integers(config.min_relations, config.max_relations + 1))
        rels = tuple(int(r) for r in srng.choice(len(catalog), size=m, replace=False))
        # random spanning tree: every new relation joins one earlier relation
        lo, hi = (math.log(f) for f in config.fanout_range)
        edges = tuple((int(srng.integers(i)), i, float(np.exp(srng.uniform(lo, hi))))
                      for i in range(1, m))
        slo, shi = (math.log(x) for x in config.selectivity_range)
        sels = tuple(1.0 if srng.random() < config.unfiltered_prob
                     else float(np.exp(srng.uniform(slo, shi))) for _ in range(m))
        regime = int(srng.integers(len(config.error_regimes)))
        e_mu, e_sd, f_mu, f_sd = config.error_regimes[regime]
        edge_err = tuple(float(np.exp(srng.normal(e_mu, e_sd))) for _ in edges)
        filt_err = tuple(float(np.exp(srng.normal(f_mu, f_sd))) for _ in range(m))
        covered = tuple(bool(srng.random() < 0.5) for _ in range(m))
        templates.append(Template(t, rels, sels, edges, filt_err, edge_err, covered, shape_seed, regime))
    return templates


def _instance(template: Template, catalog: np.ndarray, query_id: int,
              rng: np.random.Generator, group: int = -1) -> QueryDescriptor:
    sels = tuple(float(min(1.0, s * math.exp(rng.normal(0.0, 0.3))))
                 for s in template.base_selectivities)
    return QueryDescriptor(
        query_id=query_id, template_id=template.template_id,
        relations=template.relations,
        sizes=tuple(float(catalog[r]) for r in template.relations),
        selectivities=sels, edges=template.edges,
        filter_errors=template.filter_errors, edge_errors=template.edge_errors,
        covered=template.covered, shape_seed=template.shape_seed, group=group)


def make_workload(config: EnvConfig, templates: Sequence[Template], catalog: np.ndarray,
                  rng: np.random.Generator) -> list[QueryDescriptor]:
    """Order query instances into a workload.

    With grouping, each template is assigned to two of ``n_groups`` groups
    and half its instances go to each; groups are shuffled internally and
    concatenated, so the template mix drifts over time.  Without grouping
    the instances are uniformly shuffled.
    """
    n = config.instances_per_template
    if n < 1:
        raise ValueError("instances_per_template must be >= 1")
    if not config.grouping:
        order = [(t, -1) for t in templates for _ in range(n)]
        order = [order[i] for i in rng.permutation(len(order))]
    else:
        if config.n_groups < 2 or len(templates) < config.n_groups:
            raise ValueError("grouping needs n_groups >= 2 and at least n_groups templates")
        groups: list[list[Template]] = [[] for _ in range(config.n_groups)]
        for t in templates:
            g1, g2 = rng.choice(config.n_groups, size=2, replace=False)
            half = (n + 1) // 2
            groups[g1] += [t] * half
            groups[g2] += [t] * (n - half)
        order = []
        for gid, g in enumerate(groups):
            order += [(g[i], gid) for i in rng.permutation(len(g))]
    return [_instance(t, catalog, qid, rng, gid) for qid, (t, gid) in enumerate(order)]


# ---------------------------------------------------------------------------
# cardinalities and physical plans

class _Cards:
    """True and estimated cardinalities for every subset of a query's relations."""

    def __init__(self, q: QueryDescriptor):
        self.q = q
        self._true: dict[frozenset, float] = {}
        self._est: dict[frozenset, float] = {}

    def get(self, rels: frozenset, estimated: bool) -> float:
        memo = self._est if estimated else self._true
        if rels not in memo:
            q = self.q
            card = 1.0
            for i in rels:
                s = q.selectivities[i] * (q.filter_errors[i] if estimated else 1.0)
                card *= q.sizes[i] * min(s, 1.0)
            for k, (a, b, fanout) in enumerate(q.edges):
                if a in rels and b in rels:
                    sel = fanout / max(q.sizes[a], q.sizes[b])
                    card *= sel * (q.edge_errors[k] if estimated else 1.0)
            memo[rels] = max(card, 1.0)
        return memo[rels]


@dataclass
class _Phys:
    op: Op
    rels: frozenset
    children: tuple = ()
    relation: int | None = None     # scan position in the query
    outer: frozenset | None = None  # set for parameterized inner index scans
    cross: bool = False


@dataclass
class CostModel:
    """Per-operator cost formulas shared by optimizer estimates and execution.

    Units are abstract; ``_LATENCY_SCALE`` maps them to seconds.
    """

    memory_rows: float = 2e5
    seq_page: float = 1 / 50          # per row read sequentially
    cpu_row: float = 0.01             # per row processed by a scan
    index_row: float = 0.8            # per row fetched through an index
    covered_row: float = 0.05         # index-only fetch on a covering index
    uncovered_row: float = 0.9        # index-only fetch that has to visit the heap
    probe: float = 0.3                # per index descent, times log2(rows)
    hash_row: float = 0.015
    spill_row: float = 0.05           # extra per input row once the build side spills
    merge_row: float = 0.01
    sort_row: float = 0.002           # times log2(rows)
    loop_pair: float = 0.0002         # per (outer, inner) pair without an index
    emit_row: float = 0.005
    cache_saving: float = 0.9         # fraction of I/O saved on cached data

    def node_cost(self, node: _Phys, q: QueryDescriptor, cards: _Cards, est: bool,
                  cache: Sequence[float]) -> float:
        C = lambda rels: cards.get(rels, est)  # noqa: E731
        op = node.op
        if op in SCAN_OPERATORS:
            r = node.relation
            N = q.sizes[r]
            io = 1.0 - self.cache_saving * cache[r]
            per_row = {Op.INDEX_SCAN: self.index_row,
                       Op.INDEX_ONLY_SCAN: self.covered_row if q.covered[r] else self.uncovered_row}
            if node.outer is not None:
                loops = C(node.outer)
                return loops * self.probe * math.log2(N) + C(node.rels | node.outer) * per_row[op] * io
            m = C(node.rels)
            if op == Op.SEQ_SCAN:
                return N * self.seq_page * io + self.cpu_row * N
            return m * per_row[op] * io + 0.5 * self.cpu_row * m + 100 * self.probe * math.log2(N)
        if op == Op.SORT:
            n = C(node.rels)
            return self.sort_row * n * math.log2(max(n, 2.0))
        if op == Op.AGGREGATE:
            return self.cpu_row * C(node.rels)
        outer, inner = node.children
        if op == Op.CROSS_JOIN:
            L, R = _cross_card(outer, q, cards), _cross_card(inner, q, cards)
            return (self.loop_pair + self.emit_row) * L * R
        L, R, O = C(outer.rels), C(inner.rels), C(node.rels)
        if op == Op.HASH_JOIN:
            spill = self.spill_row * (L + R) if R > self.memory_rows else 0.0
            return self.hash_row * (L + R) + self.emit_row * O + spill
        if op == Op.MERGE_JOIN:
            return self.merge_row * (L + R) + self.emit_row * O
        if op == Op.LOOP_JOIN:
            if inner.outer is not None:
                return 0.001 * L + self.emit_row * O
            return self.loop_pair * L * R + self.emit_row * O
        raise ValueError(f"no cost formula for {op!r}")

    def total(self, node: _Phys, q, cards, est, cache) -> float:
        return self.node_cost(node, q, cards, est, cache) + sum(
            self.total(c, q, cards, est, cache) for c in node.children)


def _connected(rels: frozenset, edges) -> bool:
    if len(rels) <= 1:
        return True
    start = next(iter(rels))
    seen, stack = {start}, [start]
    while stack:
        x = stack.pop()
        for a, b, _ in edges:
            for u, v in ((a, b), (b, a)):
                if u == x and v in rels and v not in seen:
                    seen.add(v)
                    stack.append(v)
    return seen == set(rels)


class Optimizer:
    """Left-deep dynamic-programming optimizer restricted by a hint set."""

    def __init__(self, cost: CostModel):
        self.cost = cost

    def plan(self, q: QueryDescriptor, cards: _Cards, arm: HintSet,
             cache: Sequence[float]) -> _Phys:
        m = len(q.relations)
        # keyed by id(); the node is stored alongside so its id is never recycled
        totals: dict[int, tuple[_Phys, float]] = {}

        def est(node: _Phys) -> float:
            key = id(node)
            if key not in totals:
                totals[key] = (node, self.cost.node_cost(node, q, cards, True, cache) + sum(
                    est(c) for c in node.children))
            return totals[key][1]

        scan_ops = [_SCAN_OP[s] for s in SCAN_OPS if s in arm.scans]
        join_ops = [_JOIN_OP[j] for j in JOIN_OPS if j in arm.joins]
        index_ops = [o for o in scan_ops if o != Op.SEQ_SCAN]

        best_scan = {}
        for r in range(m):
            cands = [_Phys(o, frozenset([r]), relation=r) for o in scan_ops]
            best_scan[r] = min(cands, key=est)

        best: dict[frozenset, tuple[float, _Phys]] = {
            frozenset([r]): (est(best_scan[r]), best_scan[r]) for r in range(m)}
        for size in range(2, m + 1):
            for combo in itertools.combinations(range(m), size):
                S = frozenset(combo)
                if not _connected(S, q.edges):
                    continue
                winner = None
                for r in combo:
                    rest = S - {r}
                    if rest not in best or not any(
                            (a == r and b in rest) or (b == r and a in rest) for a, b, _ in q.edges):
                        continue
                    rest_plan = best[rest][1]
                    for op in join_ops:
                        for node in self._joins(op, rest_plan, r, S, best_scan, index_ops):
                            c = est(node)
                            if winner is None or c < winner[0]:
                                winner = (c, node)
                if winner is not None:
                    best[S] = winner
        full = frozenset(range(m))
        root = best[full][1]
        return _Phys(Op.AGGREGATE, full, (root,))

    @staticmethod
    def _joins(op, outer: _Phys, r: int, S: frozenset, best_scan, index_ops):
        inner = best_scan[r]
        if op == Op.HASH_JOIN:
            yield _Phys(op, S, (outer, inner))
        elif op == Op.MERGE_JOIN:
            o = outer if outer.op in (Op.INDEX_SCAN, Op.INDEX_ONLY_SCAN) else _Phys(Op.SORT, outer.rels, (outer,))
            i = inner if inner.op in (Op.INDEX_SCAN, Op.INDEX_ONLY_SCAN) else _Phys(Op.SORT, inner.rels, (inner,))
            yield _Phys(op, S, (o, i))
        else:
            yield _Phys(op, S, (outer, inner))
            for iop in index_ops:
                yield _Phys(op, S, (outer, _Phys(iop, frozenset([r]), relation=r, outer=outer.rels)))


def cross_join_plan(q: QueryDescriptor) -> _Phys:
    """Left-deep cross-join plan over sequential scans, in relation order."""
    acc = _Phys(Op.SEQ_SCAN, frozenset([0]), relation=0)
    for r in range(1, len(q.relations)):
        scan = _Phys(Op.SEQ_SCAN, frozenset([r]), relation=r)
        acc = _Phys(Op.CROSS_JOIN, acc.rels | {r}, (acc, scan), cross=True)
    return _Phys(Op.AGGREGATE, acc.rels, (acc,), cross=True)


def _cross_card(node: _Phys, q: QueryDescriptor, cards: _Cards) -> float:
    """Estimated rows of a cross-join subtree (no join predicates applied)."""
    if node.op == Op.SEQ_SCAN:
        return cards.get(node.rels, True)
    if node.op == Op.AGGREGATE:
        return _cross_card(node.children[0], q, cards)
    return _cross_card(node.children[0], q, cards) * _cross_card(node.children[1], q, cards)


# ---------------------------------------------------------------------------
# environment

@dataclass(frozen=True)
class CacheState:
    fractions: tuple

    def __post_init__(self):
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ValueError("cached fractions must lie in [0, 1]")

    @classmethod
    def cold(cls, n: int) -> CacheState:
        return cls((0.0,) * n)


@dataclass
class GroundTruth:
    per_arm: np.ndarray
    optimal_arm_id: int
    optimal_performance: float


class SimEnv:
    """Stateful simulated environment driven by an episode loop.

    State is the buffer cache and a clock counting executed queries.
    """

    def __init__(self, config: EnvConfig | None = None, family: HintFamily | None = None,
                 workload: list[QueryDescriptor] | None = None):
        self.config = config or EnvConfig()
        rng = np.random.default_rng(self.config.seed)
        self.catalog = make_catalog(self.config, rng)
        self.templates = make_templates(self.config, self.catalog, rng)
        self.family = family if family is not None else make_family(self.config.family)
        self.queries = workload if workload is not None else make_workload(
            self.config, self.templates, self.catalog, rng)
        self.features = feature_config(use_cache=not self.config.cold_cache)
        self.cost_model = CostModel(memory_rows=self.config.memory_rows)
        self.optimizer = Optimizer(self.cost_model)
        self.noise_rng = np.random.default_rng([self.config.seed, 1])
        self._cards: dict[int, _Cards] = {}
        self._plans: dict[tuple, _Phys] = {}
        self._vectors: dict[tuple, VectorTree] = {}
        self.reset()

    def reset(self) -> None:
        self.cache = CacheState.cold(len(self.catalog))
        self.clock = 0
        self.noise_rng = np.random.default_rng([self.config.seed, 1])

    @property
    def num_arms(self) -> int:
        return self.family.size

    def __len__(self) -> int:
        return len(self.queries)

    # -- helpers ------------------------------------------------------------

    def _cards_for(self, q: QueryDescriptor) -> _Cards:
        if q.query_id not in self._cards:
            self._cards[q.query_id] = _Cards(q)
        return self._cards[q.query_id]

    def _local_cache(self, q: QueryDescriptor, cache: CacheState) -> tuple:
        if self.config.cold_cache:
            return (0.0,) * len(q.relations)
        return tuple(round(cache.fractions[r], 2) for r in q.relations)

    def _temp_active(self, arm: AdversarialArm) -> bool:
        return self.clock < arm.switch_time

    def _physical(self, q: QueryDescriptor, arm, cache: CacheState) -> _Phys:
        local = self._local_cache(q, cache)
        if isinstance(arm, AdversarialArm):
            if arm.kind == "Temp" and self._temp_active(arm):
                best = self._regular_costs(q, local).argmin()
                return self._physical(q, self.family.regular()[best], cache)
            key = (q.query_id, "cross")
            if key not in self._plans:
                self._plans[key] = cross_join_plan(q)
            return self._plans[key]
        key = (q.query_id, arm.joins, arm.scans, local)
        if key not in self._plans:
            self._plans[key] = self.optimizer.plan(q, self._cards_for(q), arm, local)
        return self._plans[key]

    def _regular_costs(self, q: QueryDescriptor, local: tuple) -> np.ndarray:
        cards = self._cards_for(q)
        costs = []
        for arm in self.family.regular():
            key = (q.query_id, arm.joins, arm.scans, local)
            if key not in self._plans:
                self._plans[key] = self.optimizer.plan(q, cards, arm, local)
            costs.append(self.cost_model.total(self._plans[key], q, cards, False, local))
        return np.asarray(costs)

    def _to_plan_tree(self, node: _Phys, q: QueryDescriptor, local: tuple) -> PlanTree:
        cards = self._cards_for(q)

        def build(n: _Phys) -> tuple[PlanNode, float]:
            kids = [build(c) for c in n.children]
            own = self.cost_model.node_cost(n, q, cards, True, local)
            total = own + sum(k[1] for k in kids)
            if n.cross:
                card = _cross_card(n, q, cards)
            elif n.outer is not None:
                card = cards.get(n.rels | n.outer, True) / cards.get(n.outer, True)
            else:
                card = cards.get(n.rels, True)
            cache = None
            if n.op in SCAN_OPERATORS:
                cache = local[n.relation]
            return PlanNode(int(n.op), card, total, cache, tuple(k[0] for k in kids)), total

        return PlanTree(build(node)[0])

    # -- public operations ----------------------------------------------------

    def plan_for(self, query: QueryDescriptor, arm, cache: CacheState | None = None) -> PlanTree:
        cache = cache or self.cache
        local = self._local_cache(query, cache)
        return self._to_plan_tree(self._physical(query, arm, cache), query, local)

    def zero_noise_performance(self, query: QueryDescriptor, arm,
                               cache: CacheState | None = None) -> float:
        cache = cache or self.cache
        local = self._local_cache(query, cache)
        if isinstance(arm, AdversarialArm):
            best = float(self._regular_costs(query, local).min())
            if arm.kind == "Temp" and self._temp_active(arm):
                return best * _LATENCY_SCALE
            return 100.0 * best * _LATENCY_SCALE
        phys = self._physical(query, arm, cache)
        return self.cost_model.total(phys, query, self._cards_for(query), False, local) * _LATENCY_SCALE

    def true_performance(self, query: QueryDescriptor, arm, cache: CacheState | None = None,
                         rng: np.random.Generator | None = None) -> float:
        base = self.zero_noise_performance(query, arm, cache)
        sigma = self.config.noise_sigma
        if sigma == 0:
            return base
        rng = rng if rng is not None else self.noise_rng
        return float(base * math.exp(sigma * rng.standard_normal()))

    def oracle(self, query: QueryDescriptor, cache: CacheState | None = None) -> GroundTruth:
        per_arm = np.array([self.zero_noise_performance(query, a, cache) for a in self.family.arms])
        best = int(per_arm.argmin())
        return GroundTruth(per_arm, best, float(per_arm[best]))

    def scanned_relations(self, query: QueryDescriptor, arm, cache: CacheState | None = None) -> set[int]:
        phys = self._physical(query, arm, cache or self.cache)
        out, stack = set(), [phys]
        while stack:
            n = stack.pop()
            if n.op in SCAN_OPERATORS:
                out.add(query.relations[n.relation])
            stack.extend(n.children)
        return out

    def execute(self, query: QueryDescriptor, arm, cache: CacheState | None = None,
                rng: np.random.Generator | None = None) -> tuple[float, CacheState]:
        """Run ``query`` under ``arm``; returns (performance, next cache state)."""
        cache = cache or self.cache
        perf = self.true_performance(query, arm, cache, rng)
        if self.config.cold_cache:
            return perf, cache
        fr = list(cache.fractions)
        d = self.config.cache_decay
        for r in self.scanned_relations(query, arm, cache):
            fr[r] = fr[r] + d * (1.0 - fr[r])
        return perf, CacheState(tuple(fr))

    # -- episode-driver interface -------------------------------------------

    def query(self, t: int) -> QueryDescriptor:
        return self.queries[t]

    def plans(self, t: int) -> list[PlanTree]:
        q = self.queries[t]
        return [self.plan_for(q, a) for a in self.family.arms]

    def candidates(self, t: int) -> list[VectorTree]:
        q = self.queries[t]
        local = self._local_cache(q, self.cache)
        out = []
        for arm in self.family.arms:
            phys = self._physical(q, arm, self.cache)
            key = (q.query_id, id(phys), local)
            if key not in self._vectors:
                self._vectors[key] = featurize(self._to_plan_tree(phys, q, local), self.features)
            out.append(self._vectors[key])
        return out

    def ground_truth(self, t: int) -> GroundTruth:
        return self.oracle(self.queries[t], self.cache)

    def step(self, t: int, arm_id: int) -> float:
        perf, self.cache = self.execute(self.queries[t], self.family.arms[arm_id], self.cache)
        self.clock += 1
        return perf

    # -- traces ---------------------------------------------------------------

    def write_trace(self, path, horizon: int | None = None) -> None:
        """Dump every arm's plan and zero-cache measured performance as JSON lines."""
        horizon = len(self.queries) if horizon is None else horizon
        with open(path, "w") as f:
            for t in range(horizon):
                q = self.queries[t]
                for arm in self.family.arms:
                    rec = {"query_id": q.query_id, "arm_id": arm.id,
                           "plan": self.plan_for(q, arm).to_dict(),
                           "performance": self.true_performance(q, arm)}
                    f.write(json.dumps(rec, sort_keys=True) + "\n")


_LATENCY_SCALE = 1e-3   # cost units -> seconds


# ---------------------------------------------------------------------------
# trace replay

class TraceError(ValueError):
    pass


class TraceEnv:
    """Replays recorded per-arm plans and performances.

    Each line: ``{"query_id", "arm_id", "plan", "performance"}``; every
    query must list the same dense set of arms.
    """

    def __init__(self, records: dict[int, dict[int, tuple[PlanTree, float]]],
                 features: FeatureConfig | None = None):
        if not records:
            raise TraceError("trace is empty")
        self.features = features or feature_config()
        self.query_ids = list(records)
        arm_sets = {tuple(sorted(r)) for r in records.values()}
        if len(arm_sets) != 1:
            raise TraceError("queries in trace list different arm sets")
        arms = arm_sets.pop()
        if arms != tuple(range(len(arms))):
            raise TraceError(f"arm ids must be dense from 0, got {arms}")
        self._num_arms = len(arms)
        self._records = records
        self._vectors: dict[int, list[VectorTree]] = {}

    @classmethod
    def load(cls, path, features: FeatureConfig | None = None) -> TraceEnv:
        records: dict[int, dict[int, tuple[PlanTree, float]]] = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    qid, arm = int(d["query_id"]), int(d["arm_id"])
                    plan = PlanTree.from_dict(d["plan"])
                    perf = float(d["performance"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise TraceError(f"{path}:{lineno}: malformed trace line ({exc})") from exc
                if perf < 0 or not math.isfinite(perf):
                    raise TraceError(f"{path}:{lineno}: performance must be finite and >= 0")
                if arm in records.setdefault(qid, {}):
                    raise TraceError(f"{path}:{lineno}: duplicate arm {arm} for query {qid}")
                records[qid][arm] = (plan, perf)
        return cls(records, features)

    @property
    def num_arms(self) -> int:
        return self._num_arms

    def __len__(self) -> int:
        return len(self.query_ids)

    def reset(self) -> None:
        pass

    def candidates(self, t: int) -> list[VectorTree]:
        if t not in self._vectors:
            rec = self._records[self.query_ids[t]]
            self._vectors[t] = [featurize(rec[a][0], self.features) for a in range(self._num_arms)]
        return self._vectors[t]

    def ground_truth(self, t: int) -> GroundTruth:
        rec = self._records[self.query_ids[t]]
        per_arm = np.array([rec[a][1] for a in range(self._num_arms)])
        best = int(per_arm.argmin())
        return GroundTruth(per_arm, best, float(per_arm[best]))

    def query(self, t: int):
        return self.query_ids[t]

    def step(self, t: int, arm_id: int) -> float:
        return self._records[self.query_ids[t]][arm_id][1]


def calibration_gap(env: SimEnv, queries: Iterable[QueryDescriptor]) -> tuple[float, np.ndarray]:
    """Relative improvement of the per-query oracle over the best fixed arm
    (cold cache, zero noise), plus each arm's total."""
    cold = CacheState.cold(len(env.catalog))
    totals = np.zeros(env.num_arms)
    oracle_total = 0.0
    for q in queries:
        gt = env.oracle(q, cold)
        totals += gt.per_arm
        oracle_total += gt.optimal_performance
    best_fixed = totals.min()
    return 1.0 - oracle_total / best_fixed, totals
