# %% [markdown]
# # The two benchmarks
#
# Heaven/Hell is a T-shaped maze. The agent starts at the bottom of the stem,
# where a sign tells it which end of the top bar is heaven. The sign is only
# visible there, so by the time the agent reaches the junction it has to
# remember what it read.
#
# Tiger hides a tiger behind one of two doors. Listening costs a little and
# returns a noisy hint; opening a door ends the episode.

# %%
import numpy as np

from istate_pg.core import make_rng
from istate_pg.envs import make_env, chance_level_stats

hh = make_env("heaven_hell")
print(hh.id_tables_json())

# %% [markdown]
# Walk the optimal route by hand. Every move costs 0.01, including the last
# one, so the best return is 0.95.

# %%
rng = make_rng(0, 1)
obs = hh.reset(rng)
print("start observation:", hh.observation_names[obs])
left = obs == 8
route = ["up", "up", "up"] + (["left", "left"] if left else ["right", "right"])
total = 0.0
for name in route:
    obs, r, done = hh.step(hh.action_names.index(name))
    total += r
    print(f"{name:>5} -> {hh.observation_names[obs]:<22} r={r:+.2f} done={done}")
print("return", round(total, 2))

# %% [markdown]
# A uniform-random agent sets the floor each learner is compared against.

# %%
for name in ("heaven_hell", "tiger"):
    mean, se = chance_level_stats(name, 200_000, make_rng(0, 0))
    print(f"{name:12s} chance level {mean:+.4f} +- {se:.4f}")

# %% [markdown]
# Tiger's listening hint is right 85% of the time.

# %%
tiger = make_env("tiger")
hits = 0
for i in range(2000):
    tiger.reset(make_rng(1, i))
    obs, _, _ = tiger.step(0)
    hits += (obs == 1) == (tiger.tiger_side == 0)
print("listen accuracy", hits / 2000)
