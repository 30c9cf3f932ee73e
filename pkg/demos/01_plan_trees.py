"""From an optimizer plan to the tensors the value network consumes.

Asks the simulated optimizer for two plans of the same query (one per hint
set), binarizes and featurizes them, and shows how a small tree network
learns to rank plans after a few hundred observed executions.

    python demos/01_plan_trees.py
"""
import numpy as np

from hintsteer.plan import binarize, featurize
from hintsteer.simenv import EnvConfig, FamilyConfig, Op, SimEnv
from hintsteer.tcnn import TcnnModel, TrainConfig, train


def show(node, depth=0):
    name = Op(node.op).name if node.op else "NULL"
    print(f"{'  ' * depth}{name:<16} rows~{node.card:>12.0f} cost~{node.cost:>12.1f}")
    for child in node.children:
        show(child, depth + 1)


env = SimEnv(EnvConfig(seed=0, cold_cache=True, family=FamilyConfig.reduced()))
query = max(env.queries[:50], key=lambda q: len(q.relations))
print(f"query {query.query_id}: {len(query.relations)} relations, template {query.template_id}\n")
for arm in env.family.arms[:2]:
    print(f"hint set {arm.name}:")
    tree = binarize(env.plan_for(query, arm))
    show(tree.root)
    vt = featurize(tree, env.features)
    print(f"  -> {vt.node_count} nodes, feature width {vt.width}, "
          f"true latency {env.zero_noise_performance(query, arm):.3f}s\n")

# Learn latency from (plan, observed latency) pairs on the first 300 queries,
# then check how often the network's favourite plan is the true best on the
# next 100.
rng = np.random.default_rng(0)
data = []
for t in range(300):
    cands, truth = env.candidates(t), env.ground_truth(t)
    for arm in rng.choice(env.num_arms, size=3, replace=False):
        data.append((cands[arm], float(truth.per_arm[arm])))
model = TcnnModel(env.features.width, conv_dims=(64, 32, 16), fc_dims=(16, 1), seed=0)
model, history = train(model, data, TrainConfig(max_epochs=60))
print(f"trained on {len(data)} executions for {len(history)} epochs, "
      f"loss {history[0]:.3f} -> {history[-1]:.3f}")

hits, regret, naive = 0, [], []
for t in range(300, 400):
    truth = env.ground_truth(t)
    pick = int(np.argmin(model.predict(env.candidates(t))))
    hits += pick == truth.optimal_arm_id
    regret.append(truth.per_arm[pick] - truth.optimal_performance)
    naive.append(truth.per_arm[0] - truth.optimal_performance)
print(f"held-out queries: best plan picked {hits}/100, mean regret {np.mean(regret):.3f}s "
      f"(optimizer default: {np.mean(naive):.3f}s)")
