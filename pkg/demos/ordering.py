"""
Collaboration vs. the baselines
===============================

Ten clients, eight of them with a 10% uplink.  We compare relaying on two
inter-client densities against the blind and non-blind PS baselines and
against the ideal all-uplinks-up run.  All modes share gradient noise per
seed, so the differences come from the network alone.
"""

import numpy as np

from colrel import Schedule, build_erdos_renyi, optimize_weights, random_quadratic, run_simulation

p = np.full(10, 0.1)
p[6], p[9] = 0.8, 0.9
obj = random_quadratic(10, 10, 1.0, 4.0, 1.0, np.random.default_rng(3), spread=1.0, offset=10.0)
sched = Schedule(rounds=20, local_steps=4, lr=0.05, momentum=0.0)
seeds = range(20)


def final_error(model, A, mode):
    return np.mean([run_simulation(model, A, obj, sched, mode, s).dist_sq[-1] for s in seeds])


# %%
# Relaying on dense and sparse client graphs.
for pc in (0.9, 0.5):
    m = build_erdos_renyi(10, pc, p)
    A, _ = optimize_weights(m)
    print("colrel, p_c=%.1f   %.4g" % (pc, final_error(m, A, "colrel")))

# %%
# The baselines ignore the client graph.
for mode in ("nonblind", "blind", "perfect"):
    print("%-16s %.4g" % (mode, final_error(m, None, mode)))
