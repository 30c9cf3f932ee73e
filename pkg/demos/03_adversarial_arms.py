"""Two deliberately bad arms and how the bandit copes.

``CJ`` always produces a cross-join plan that costs 100x the best plan.
``Temp`` mirrors the best regular plan until ``switch_time`` and then turns
into the same 100x disaster.  The trailing-100 selection frequency of each
shows the bandit abandoning them.

    python demos/03_adversarial_arms.py
"""
import numpy as np

from hintsteer.bandit import BanditConfig, run_episode
from hintsteer.metrics import selection_frequency
from hintsteer.simenv import EnvConfig, FamilyConfig, SimEnv

SWITCH = 500
config = BanditConfig(retrain_every_n=50, window_k=1000, seed=0,
                      conv_dims=(64, 32, 16), fc_dims=(16, 1))
family = FamilyConfig.reduced(adversarial=[{"kind": "CJ"},
                                           {"kind": "Temp", "switch_time": SWITCH}])
env = SimEnv(EnvConfig(seed=0, cold_cache=True, grouping=False, family=family))
names = env.family.names()
log = run_episode(env, config, SWITCH + 300)
arms = log.arm_ids()

for name in ("CJ", "Temp"):
    arm = next(i for i, n in enumerate(names) if n.startswith(name))
    picks = np.flatnonzero(arms == arm)
    freq = selection_frequency(arms, arm)
    print(f"{name}: picked {len(picks)} times, first at {picks[:1]}, last at {picks[-1:]}")
    print("  trailing-100 frequency every 50 queries:",
          " ".join(f"{f:.2f}" for f in freq[49::50]))
print(f"\nTemp switched at query {SWITCH}; after it the arm costs 100x the best plan.")
