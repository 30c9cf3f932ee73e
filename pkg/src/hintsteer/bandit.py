"""Thompson-sampling hint-set selection.

Every query: ask the environment for one plan per arm, score each plan
with the current model, run the arm whose plan looks fastest, and record
only that outcome.  Every ``n`` queries a fresh model is trained on a
bootstrap resample of the ``k`` most recent outcomes; training on a
resample rather than on the data itself is what makes the selection a
(approximate) posterior sample instead of a greedy fit.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .metrics import RegretSample, regret_sample
from .plan import VectorTree
from .tcnn import TcnnModel, TrainConfig, train

log = logging.getLogger(__name__)

MODES = ("thompson_bootstrap", "greedy")


@dataclass
class BanditConfig:
    retrain_every_n: int = 100
    window_k: int = 2000
    exploration_mode: str = "thompson_bootstrap"
    seed: int = 0
    overlap_train: bool = False
    conv_dims: tuple = (256, 128, 64)
    fc_dims: tuple = (32, 1)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.conv_dims = tuple(self.conv_dims)
        self.fc_dims = tuple(self.fc_dims)
        if self.retrain_every_n < 1 or self.window_k < 1:
            raise ValueError("retrain_every_n and window_k must be positive")
        if self.exploration_mode not in MODES:
            raise ValueError(f"exploration_mode must be one of {MODES}")


@dataclass(frozen=True)
class ExperienceEntry:
    tree: VectorTree
    performance: float
    query_id: object
    arm_id: int
    timestamp: int


class Experience:
    """The ``window_k`` most recent (plan, observed performance) pairs."""

    def __init__(self, window_k: int):
        if window_k < 1:
            raise ValueError("window_k must be positive")
        self.window_k = window_k
        self.entries: deque[ExperienceEntry] = deque(maxlen=window_k)

    def __len__(self) -> int:
        return len(self.entries)

    def snapshot(self) -> tuple[ExperienceEntry, ...]:
        return tuple(self.entries)


def record_outcome(experience: Experience, query_id, arm_id: int, tree: VectorTree,
                   performance: float, timestamp: int | None = None) -> Experience:
    if not performance >= 0:
        raise ValueError(f"performance must be non-negative, got {performance}")
    if timestamp is None:
        timestamp = experience.entries[-1].timestamp + 1 if experience.entries else 0
    experience.entries.append(ExperienceEntry(tree, float(performance), query_id, arm_id, timestamp))
    return experience


def bootstrap_sample(entries: Sequence[ExperienceEntry] | Experience,
                     rng: np.random.Generator) -> list[ExperienceEntry]:
    """``len(entries)`` draws with replacement."""
    entries = entries.snapshot() if isinstance(entries, Experience) else tuple(entries)
    if not entries:
        raise ValueError("cannot bootstrap an empty experience")
    idx = rng.integers(0, len(entries), size=len(entries))
    return [entries[i] for i in idx]


@dataclass
class ArmChoice:
    arm_id: int
    predicted_performance: float
    all_predictions: np.ndarray


def select_arm(model, candidates: Sequence[VectorTree]) -> ArmChoice:
    """Pick the arm whose plan has the lowest predicted performance.

    Identical plans are scored once, so they are guaranteed to tie; ties
    go to the lowest arm id.  ``model`` only needs a ``predict(trees)``.
    """
    if not candidates:
        raise ValueError("no candidate plans")
    slot: dict[bytes, int] = {}
    unique: list[VectorTree] = []
    where = []
    for tree in candidates:
        key = tree.flat.key
        if key not in slot:
            slot[key] = len(unique)
            unique.append(tree)
        where.append(slot[key])
    preds = np.asarray(model.predict(unique), dtype=np.float64)[where]
    best = int(np.argmin(preds))
    return ArmChoice(best, float(preds[best]), preds)


@dataclass
class ModelVersion:
    model: object
    version: int
    trained_through: int       # last timestamp included in the training set
    n_examples: int
    epochs: int
    final_loss: float


@dataclass
class BanditState:
    experience: Experience
    model: ModelVersion | None = None
    since_train: int = 0
    retrain_count: int = 0
    failures: int = 0
    in_dim: int | None = None


def _fit(snapshot, config: BanditConfig, in_dim: int, seed: int, rng: np.random.Generator,
         version: int) -> ModelVersion:
    data = bootstrap_sample(snapshot, rng) if config.exploration_mode == "thompson_bootstrap" \
        else list(snapshot)
    model = TcnnModel(in_dim, config.conv_dims, config.fc_dims, seed=seed)
    trained, history = train(model, [(e.tree, e.performance) for e in data], config.train, rng)
    return ModelVersion(trained, version, max(e.timestamp for e in snapshot),
                        len(data), len(history), history[-1])


def maybe_retrain(state: BanditState, config: BanditConfig,
                  rng: np.random.Generator) -> ModelVersion | None:
    """Train and swap in a new model if ``n`` queries ran since the last one."""
    if state.since_train < config.retrain_every_n:
        return None
    state.since_train = 0
    if not len(state.experience):
        return None
    seed = int(rng.integers(2 ** 31))
    try:
        mv = _fit(state.experience.snapshot(), config, state.in_dim, seed, rng,
                  state.retrain_count + 1)
    except Exception:
        state.failures += 1
        log.exception("retraining failed; keeping model version %s",
                      state.model.version if state.model else None)
        return None
    state.model = mv
    state.retrain_count += 1
    return mv


# ---------------------------------------------------------------------------
# episodes

class Environment(Protocol):
    num_arms: int

    def candidates(self, t: int) -> list[VectorTree]: ...
    def step(self, t: int, arm_id: int) -> float: ...
    def ground_truth(self, t: int): ...
    def query(self, t: int): ...
    def __len__(self) -> int: ...


@dataclass
class QueryRecord:
    step: int
    query_id: object
    arm_id: int
    performance: float
    predictions: list | None
    optimal_performance: float | None
    chosen_true_performance: float | None
    model_version: int
    trained_through: int | None

    def regret(self) -> RegretSample | None:
        if self.optimal_performance is None:
            return None
        return RegretSample(self.query_id, self.chosen_true_performance, self.optimal_performance,
                            self.chosen_true_performance - self.optimal_performance,
                            (self.chosen_true_performance - self.optimal_performance) ** 2)


@dataclass
class EpisodeLog:
    records: list[QueryRecord] = field(default_factory=list)
    retrains: list[dict] = field(default_factory=list)
    failures: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def arm_ids(self) -> np.ndarray:
        return np.array([r.arm_id for r in self.records], dtype=np.int64)

    def performances(self) -> np.ndarray:
        return np.array([r.performance for r in self.records])

    def regrets(self) -> list[RegretSample]:
        return [r.regret() for r in self.records if r.optimal_performance is not None]

    def linear_regret(self) -> np.ndarray:
        return np.array([s.linear_regret for s in self.regrets()])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> EpisodeLog:
        records = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(QueryRecord(**json.loads(line)))
                except (ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad episode record ({exc})") from exc
        return cls(records)


def parse_policy(policy: str) -> tuple[str, int | None]:
    if policy in ("steer", "random", "oracle"):
        return policy, None
    for prefix in ("fixed-arm:", "fixed:"):
        if policy.startswith(prefix):
            return "fixed", int(policy[len(prefix):])
    raise ValueError(f"unknown policy {policy!r}")


def run_episode(env: Environment, config: BanditConfig, horizon: int, policy: str = "steer",
                initial_model=None, checkpoint_dir=None) -> EpisodeLog:
    """Drive ``env`` for ``horizon`` queries.

    ``policy`` is ``steer`` (the bandit), ``random``, ``oracle`` or
    ``fixed-arm:ID``.  Until the first model is trained, ``steer`` picks
    arms uniformly at random.  The model that serves query ``t`` was
    trained only on outcomes of queries before ``t``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if horizon > len(env):
        raise ValueError(f"horizon {horizon} exceeds workload length {len(env)}")
    kind, fixed_arm = parse_policy(policy)
    if kind == "fixed" and not 0 <= fixed_arm < env.num_arms:
        raise ValueError(f"arm {fixed_arm} not in family of {env.num_arms}")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    pick_rng, train_rng = (np.random.default_rng(s) for s in seeds)
    state = BanditState(Experience(config.window_k))
    if initial_model is not None:
        state.model = ModelVersion(initial_model, 0, -1, 0, 0, float("nan"))
    log_ = EpisodeLog()
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    pool = ThreadPoolExecutor(max_workers=1) if config.overlap_train else None
    pending: Future | None = None

    def on_new_model(mv: ModelVersion) -> None:
        log_.retrains.append({"version": mv.version, "trained_through": mv.trained_through,
                              "n_examples": mv.n_examples, "epochs": mv.epochs,
                              "final_loss": mv.final_loss})
        if ckpt is not None and isinstance(mv.model, TcnnModel):
            mv.model.save(ckpt / f"model_{mv.version:04d}.bin", config.train)

    try:
        for t in range(horizon):
            if pending is not None and pending.done():
                mv = _collect(pending, state)
                pending = None
                if mv is not None:
                    on_new_model(mv)
            cands = env.candidates(t)
            if state.in_dim is None:
                state.in_dim = cands[0].width
            truth = env.ground_truth(t)
            preds = None
            if kind == "steer":
                if state.model is None:
                    arm = int(pick_rng.integers(env.num_arms))
                else:
                    choice = select_arm(state.model.model, cands)
                    arm, preds = choice.arm_id, [float(p) for p in choice.all_predictions]
            elif kind == "random":
                arm = int(pick_rng.integers(env.num_arms))
            elif kind == "oracle":
                arm = int(truth.optimal_arm_id)
            else:
                arm = fixed_arm
            perf = env.step(t, arm)
            mv = state.model
            log_.records.append(QueryRecord(
                step=t, query_id=_jsonable(env.query(t)), arm_id=arm, performance=float(perf),
                predictions=preds,
                optimal_performance=None if truth is None else float(truth.optimal_performance),
                chosen_true_performance=None if truth is None else float(truth.per_arm[arm]),
                model_version=mv.version if mv else 0,
                trained_through=mv.trained_through if mv else None))
            if kind != "steer":
                continue
            record_outcome(state.experience, log_.records[-1].query_id, arm, cands[arm], perf, t)
            state.since_train += 1
            if pool is None:
                new = maybe_retrain(state, config, train_rng)
                if new is not None:
                    on_new_model(new)
            elif pending is None and state.since_train >= config.retrain_every_n:
                pending = _submit(pool, state, config, train_rng)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if pending is not None:
        mv = _collect(pending, state)
        if mv is not None:
            on_new_model(mv)
    log_.failures = state.failures
    return log_


def _submit(pool, state: BanditState, config: BanditConfig, rng) -> Future:
    snapshot = state.experience.snapshot()
    seed = int(rng.integers(2 ** 31))
    child = np.random.default_rng(int(rng.integers(2 ** 63)))
    version = state.retrain_count + 1
    return pool.submit(_fit, snapshot, config, state.in_dim, seed, child, version)


def _collect(fut: Future, state: BanditState) -> ModelVersion | None:
    state.since_train = 0
    try:
        mv = fut.result()
    except Exception:
        state.failures += 1
        log.exception("background retraining failed; keeping previous model")
        return None
    state.model = mv
    state.retrain_count += 1
    return mv


def _jsonable(qid):
    if isinstance(qid, (int, str)) or qid is None:
        return qid
    return getattr(qid, "query_id", str(qid))
