"""
Relay weights on a small network
================================

Two clients with weak uplinks and one client with a good uplink.  Every
client can hear every other with probability 0.8.  We optimize the relay
weights and look at what the good client ends up doing.
"""

import numpy as np

from colrel import ConnectivityModel, optimize_weights, s_value, unbiasedness_residuals

p = np.array([0.2, 0.3, 0.95])
P = np.full((3, 3), 0.8)
np.fill_diagonal(P, 1.0)
E = P * P.T                     # links fail independently in each direction
model = ConnectivityModel(p, P, E)

# %%
# Identity weights (each client scales its own update by 1/p_i) are unbiased
# but noisy.  Optimized weights route the weak clients through client 2.
A0 = np.diag(1 / p)
A, report = optimize_weights(model)
print("S with 1/p weights:  %.4f" % s_value(model, A0))
print("S with optimized A:  %.4f" % s_value(model, A))
print("sweeps: %d relaxed, %d fine-tune" % (report.sweeps_relaxed, report.sweeps_finetune))

# %%
# Column i holds the weights every relay applies to client i's update.
np.set_printoptions(precision=3, suppress=True)
print(A)

# %%
# Unbiasedness holds column by column.
print("max residual:", np.abs(unbiasedness_residuals(model, A)).max())
