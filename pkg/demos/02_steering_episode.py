"""An online steering episode against simple baselines.

Runs the Thompson-sampling loop over a drifting workload and compares its
per-window regret with uniform random choice, the optimizer's unhinted
default (arm 0) and the per-query oracle.

    python demos/02_steering_episode.py [horizon]
"""
import sys

import numpy as np

from hintsteer.bandit import BanditConfig, run_episode
from hintsteer.metrics import percentiles
from hintsteer.simenv import EnvConfig, FamilyConfig, SimEnv

horizon = int(sys.argv[1]) if len(sys.argv) > 1 else 600
window = 100
config = BanditConfig(retrain_every_n=50, window_k=1000, seed=0,
                      conv_dims=(64, 32, 16), fc_dims=(16, 1))

rows = {}
for policy in ("steer", "random", "fixed-arm:0", "oracle"):
    env = SimEnv(EnvConfig(seed=0, cold_cache=True, family=FamilyConfig.reduced()))
    log = run_episode(env, config, horizon, policy=policy)
    rows[policy] = log
    print(f"{policy:<12} total latency {log.performances().sum():8.1f}s  "
          f"p50/p95/p99 {np.round(percentiles(log.performances(), [0.5, 0.95, 0.99]), 2)}")

print(f"\nmean linear regret per {window}-query window")
print("window      " + "".join(f"{p:>12}" for p in rows))
for start in range(0, horizon, window):
    cells = "".join(f"{rows[p].linear_regret()[start:start + window].mean():12.3f}" for p in rows)
    print(f"{start:>5}-{start + window - 1:<5}" + cells)

steer = rows["steer"]
print(f"\nsteering retrained {len(steer.retrains)} times; "
      f"arms used: {np.bincount(steer.arm_ids(), minlength=env.num_arms)}")
