# %% [markdown]
# # What did the internal states learn?
#
# Roll the greedy policy out many times, count transitions between
# (observation, internal state) pairs, drop pairs that never occur and export
# the rest as a graph.

# %%
from pathlib import Path
import tempfile

from istate_pg import statemap
from istate_pg.train import TrainConfig, train, evaluate

policy = train(TrainConfig("tiger", num_updates=4000, seed=2)).policy
print("greedy return", evaluate(policy, "tiger", 1000))

rollouts = statemap.harvest_rollouts(policy, "tiger", 10_000, seed=2)
full = statemap.build_matrix(rollouts, policy.num_observations, policy.num_internal_states)
matrix, kept = statemap.prune_unreachable(full)
print(f"{len(kept)} of {full.num_pairs} pairs are reachable")

# %%
graph = statemap.build_graph(matrix, "tiger")
table = statemap.build_policy_table(policy, kept)
print(statemap.to_dot(graph, table))

# %% [markdown]
# Does the agent wait for two agreeing hints before opening?

# %%
print("listens twice in a row before opening:", statemap.verify_tiger_rule(rollouts))

# %%
out = Path(tempfile.mkdtemp())
for name, path in statemap.write_statemap(out, graph, table).items():
    print(name, path)

# %% [markdown]
# ## Heaven/Hell
#
# Here the question is whether the internal state at the junction tells the
# two sides apart. Seed 0 is one of the runs that solve the maze; other seeds
# can stall at the memoryless "walk or stand still" optimum (about 0.33).

# %%
hh_policy = train(TrainConfig("heaven_hell", num_updates=5000, seed=0)).policy
print("greedy return", evaluate(hh_policy, "heaven_hell", 1000))
hh_rollouts = statemap.harvest_rollouts(hh_policy, "heaven_hell", 10_000, seed=0)
print("bits about the heaven side held at the junction:",
      round(statemap.branch_mutual_information(hh_rollouts), 3))
m, kept = statemap.prune_unreachable(statemap.build_matrix(hh_rollouts, 10, 2))
print(statemap.to_dot(statemap.build_graph(m, "heaven_hell"),
                      statemap.build_policy_table(hh_policy, kept)))
