"""Command-line experiment runner.

Subcommands::

    hintsteer run         --config exp.json --seed 1 --horizon 2000 --mode steer --out runs/a
    hintsteer replay      --trace trace.jsonl --out runs/b
    hintsteer bench-train --sizes 250,500,1000,2000 --out bench.csv
    hintsteer report      --log runs/a/episode.jsonl --out runs/a

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Set
``BAO_LOG_LEVEL`` (e.g. ``INFO``) for diagnostics on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bandit import BanditConfig, EpisodeLog, parse_policy, run_episode
from .metrics import write_percentile_csv, write_regret_csv, write_selection_csv
from .simenv import CacheState, EnvConfig, FamilyConfig, SimEnv, TraceEnv, TraceError
from .tcnn import TcnnModel, TrainConfig, train

log = logging.getLogger("hintsteer")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    horizon: int = 2000
    seed: int = 0
    out: str = "out"
    mode: str = "steer"

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        if isinstance(self.bandit, dict):
            self.bandit = BanditConfig(**self.bandit)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode != "fixed-arm:best":
            parse_policy(self.mode)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Read a JSON experiment config and apply command-line overrides.

    ``env`` may be inline or a path (``env_path``) relative to the config.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "env_path" in raw:
            env_path = Path(path).parent / raw.pop("env_path")
            try:
                raw["env"] = json.loads(env_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read env config {env_path}: {exc}") from exc
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    # one seed drives everything
    cfg.env.seed = cfg.seed
    cfg.bandit.seed = cfg.seed
    return cfg


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


# ---------------------------------------------------------------------------
# summaries and artifacts

def summarize(ep: EpisodeLog) -> dict:
    regrets = ep.linear_regret()
    return {
        "queries": len(ep),
        "total_performance": float(ep.performances().sum()),
        "mean_regret": float(regrets.mean()) if regrets.size else None,
        "median_regret": float(np.median(regrets)) if regrets.size else None,
        "retrains": len(ep.retrains),
        "retrain_failures": ep.failures,
    }


def summary_line(s: dict) -> str:
    fmt = lambda v: "n/a" if v is None else f"{v:.6g}"  # noqa: E731
    return (f"queries={s['queries']} total_performance={fmt(s['total_performance'])} "
            f"mean_regret={fmt(s['mean_regret'])} median_regret={fmt(s['median_regret'])} "
            f"retrains={s['retrains']}")


def write_artifacts(ep: EpisodeLog, out: Path, num_arms: int, write_log: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    if write_log:
        ep.to_jsonl(out / "episode.jsonl")
    samples = ep.regrets()
    if samples:
        write_regret_csv(out / "regret.csv", samples)
    write_percentile_csv(out / "percentiles.csv", ep.performances())
    write_selection_csv(out / "selection.csv", ep.arm_ids(), num_arms)
    if write_log:
        meta = {"retrains": ep.retrains, "failures": ep.failures}
        (out / "retrains.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    s = summarize(ep)
    (out / "summary.json").write_text(json.dumps(s, indent=2, sort_keys=True) + "\n")
    return s


def _check_arm(mode: str, num_arms: int) -> None:
    if mode == "fixed-arm:best":
        return
    kind, arm = parse_policy(mode)
    if kind == "fixed" and not 0 <= arm < num_arms:
        raise ConfigError(f"arm {arm} not in family of {num_arms}")


def best_fixed_arm(env: SimEnv, horizon: int) -> int:
    """Hindsight-best single arm over the first ``horizon`` queries (cold cache)."""
    cold = CacheState.cold(len(env.catalog))
    totals = sum(env.oracle(q, cold).per_arm for q in env.queries[:horizon])
    return int(np.argmin(totals))


# ---------------------------------------------------------------------------
# subcommands

def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "horizon": args.horizon, "out": args.out, "mode": args.mode}
    cfg = load_config(args.config, overrides)
    if args.overlap_train is not None:
        cfg.bandit.overlap_train = args.overlap_train
    try:
        env = SimEnv(cfg.env)
    except ValueError as exc:
        raise ConfigError(f"invalid environment: {exc}") from exc
    if cfg.horizon > len(env):
        raise ConfigError(f"horizon {cfg.horizon} exceeds workload of {len(env)} queries")
    _check_arm(cfg.mode, env.num_arms)
    mode = cfg.mode
    if mode == "fixed-arm:best":
        mode = f"fixed-arm:{best_fixed_arm(env, cfg.horizon)}"
        log.info("best fixed arm resolved to %s", mode)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ep = run_episode(env, cfg.bandit, cfg.horizon, policy=mode, checkpoint_dir=out / "checkpoints")
    s = write_artifacts(ep, out, env.num_arms)
    print(summary_line(s))
    return EXIT_OK


def cmd_replay(args) -> int:
    overrides = {"seed": args.seed, "horizon": args.horizon, "out": args.out, "mode": args.mode}
    cfg = load_config(args.config, {**overrides, "horizon": None})
    try:
        env = TraceEnv.load(args.trace)
    except OSError as exc:
        raise ConfigError(f"cannot read trace: {exc}") from exc
    except TraceError as exc:
        raise ConfigError(str(exc)) from exc
    horizon = args.horizon or len(env)
    if not 1 <= horizon <= len(env):
        raise ConfigError(f"horizon {horizon} outside 1..{len(env)} for this trace")
    if cfg.mode == "fixed-arm:best":
        raise ConfigError("fixed-arm:best needs the simulator; give an arm id for replays")
    _check_arm(cfg.mode, env.num_arms)
    if args.overlap_train is not None:
        cfg.bandit.overlap_train = args.overlap_train
    out = Path(cfg.out)
    ep = run_episode(env, cfg.bandit, horizon, policy=cfg.mode, checkpoint_dir=out / "checkpoints")
    s = write_artifacts(ep, out, env.num_arms)
    print(summary_line(s))
    return EXIT_OK


def bench_train(sizes, epochs: int = 5, seed: int = 0, conv_dims=(256, 128, 64),
                fc_dims=(32, 1), env_config: EnvConfig | None = None) -> list[dict]:
    """Time ``train`` for each window size on plans drawn from the simulator.

    The convergence rule is disabled so every size runs exactly ``epochs``
    epochs; the result is the wall time of the whole call.
    """
    env = SimEnv(env_config or EnvConfig(seed=seed, cold_cache=True, family=FamilyConfig.reduced()))
    rng = np.random.default_rng(seed)
    pool = []
    need = max(sizes)
    t = 0
    while len(pool) < need:
        cands = env.candidates(t % len(env))
        truth = env.ground_truth(t % len(env))
        for arm in rng.permutation(env.num_arms)[:3]:
            pool.append((cands[arm], float(truth.per_arm[arm])))
        t += 1
    cfg = TrainConfig(max_epochs=epochs, convergence_window=epochs + 1)
    rows = []
    for k in sizes:
        data = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
        model = TcnnModel(env.features.width, conv_dims, fc_dims, seed=seed)
        start = time.perf_counter()
        _, history = train(model, data, cfg, np.random.default_rng(seed))
        secs = time.perf_counter() - start
        rows.append({"k": k, "seconds": secs, "epochs": len(history),
                     "seconds_per_epoch": secs / len(history)})
    return rows


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["k", "seconds", "epochs", "seconds_per_epoch"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "seconds": f"{r['seconds']:.6f}",
                        "seconds_per_epoch": f"{r['seconds_per_epoch']:.6f}"})


def cmd_bench(args) -> int:
    conv = tuple(args.conv_dims) if args.conv_dims else (256, 128, 64)
    fc = tuple(args.fc_dims) if args.fc_dims else (32, 1)
    rows = bench_train(args.sizes, args.epochs, args.seed or 0, conv, fc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows)
    for r in rows:
        print(f"k={r['k']} seconds={r['seconds']:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        ep = EpisodeLog.from_jsonl(args.log)
    except OSError as exc:
        raise ConfigError(f"cannot read episode log: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not len(ep):
        raise ConfigError(f"{args.log}: episode log is empty")
    meta_path = Path(args.log).parent / "retrains.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        ep.retrains, ep.failures = meta["retrains"], meta["failures"]
    num_arms = args.num_arms
    if num_arms is None:
        widths = [len(r.predictions) for r in ep.records if r.predictions]
        num_arms = max(widths + [int(ep.arm_ids().max()) + 1])
    s = write_artifacts(ep, Path(args.out or Path(args.log).parent), num_arms, write_log=False)
    print(summary_line(s))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hintsteer", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trace=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--mode", help="steer | fixed-arm:ID | fixed-arm:best | oracle | random")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--overlap-train", type=_bool, metavar="BOOL")
        if trace:
            sp.add_argument("--trace", required=True, help="JSON-lines trace of per-arm plans")

    common(sub.add_parser("run", help="run an episode on the simulator"))
    common(sub.add_parser("replay", help="run an episode over a recorded trace"), trace=True)

    b = sub.add_parser("bench-train", help="time model training against window size")
    b.add_argument("--sizes", type=_sizes, default=[250, 500, 1000, 2000])
    b.add_argument("--epochs", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--conv-dims", type=int, nargs="+")
    b.add_argument("--fc-dims", type=int, nargs="+")
    b.add_argument("--out", default="bench_train.csv")

    r = sub.add_parser("report", help="rebuild CSVs and summary from an episode log")
    r.add_argument("--log", required=True)
    r.add_argument("--out")
    r.add_argument("--num-arms", type=int)
    return p


COMMANDS = {"run": cmd_run, "replay": cmd_replay, "bench-train": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    level = os.environ.get("BAO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
