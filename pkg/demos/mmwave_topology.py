"""
Intermittent mmWave links vs. permanent links only
==================================================

Three gateway clients sit 140 m from the PS; the rest are 280-290 m out.
Keeping every link that works at least half the time gives a denser relay
graph than keeping only the near-certain ones.  With permanent links alone,
the far clients that reach no gateway are cut off from the PS entirely.
"""

import numpy as np

from colrel import (Schedule, build_mmwave, build_threshold, make_logistic_synthetic, optimize_weights,
                    run_simulation)


def polar(r, deg):
    t = np.deg2rad(deg)
    return [r * np.cos(t), r * np.sin(t)]


gates = [0.0, 120.0, 240.0]
pos = np.array([polar(140, g) for g in gates] + [polar(280, g) for g in gates]
               + [polar(290, -19.6), polar(290, 19.6), polar(290, 139.6), polar(290, 220.4)])

inter = build_mmwave(pos, prune_below=0.5)
thresh = build_threshold(pos)
print("client links: intermittent %d, permanent %d"
      % (np.count_nonzero(inter.P) - 10, np.count_nonzero(thresh.P) - 10))

A_i, _ = optimize_weights(inter)
A_t, rep = optimize_weights(thresh, unreachable="drop")
print("clients unreachable with permanent links only:", rep.unreachable)

# %%
# Softmax regression on label-skewed synthetic data, three labels per client.
obj = make_logistic_synthetic(20, 10, 300, 10, partition=3, rng=np.random.default_rng(0))
sched = Schedule(rounds=100, local_steps=8, lr=0.05, momentum=0.9, batch_size=32)

runs = {
    "intermittent": (inter, A_i, "colrel"),
    "permanent": (thresh, A_t, "colrel"),
    "no relaying": (inter, None, "blind"),
}
for name, (m, A, mode) in runs.items():
    loss = np.mean([run_simulation(m, A, obj, sched, mode, s).loss[-1] for s in range(5)])
    print("%-14s final loss %.4f" % (name, loss))
