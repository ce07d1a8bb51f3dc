"""
Empirical error against the convergence bound
=============================================

A homogeneous quadratic with condition number 4, a four-client random
network and the decaying theory step size.  We average the squared distance
to the optimum over 50 seeds and print it next to the bound.
"""

import math

import numpy as np

from colrel import Schedule, bound_curve, build_erdos_renyi, compute_constants, optimize_weights, random_quadratic

model = build_erdos_renyi(4, 0.5, [0.2, 0.5, 0.7, 0.9])
A, _ = optimize_weights(model)
obj = random_quadratic(10, 4, 1.0, 4.0, 1.0, np.random.default_rng(7), offset=1.0)

T = 4
r0 = compute_constants(model, A, obj.L, obj.mu, obj.sigma2, T).r0
sched = Schedule(rounds=math.ceil(r0) + 60, local_steps=T, step_rule="theory", mu=obj.mu)
consts, rows = bound_curve(model, A, obj, sched, seeds=range(50))
print("S = %.4f, r0 = %.2f" % (consts.S, consts.r0))

# %%
# The bound is loose by orders of magnitude but decays at the same 1/r rate.
print("%5s %12s %12s" % ("r", "bound", "mean"))
for r, b, mean, se in rows[::10]:
    print("%5d %12.4g %12.4g" % (r, b, mean))
