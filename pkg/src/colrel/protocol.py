"""Federated rounds with collaborative relaying and the FedAvg baselines.

Randomness is keyed, not sequential: the gradient noise of client ``i`` in
round ``r`` and the link outcomes of round ``r`` each come from their own
``SeedSequence`` child of the run seed. Different aggregation modes run with
the same seed therefore see identical gradient and link streams.

Sums over clients are exactly rounded (``math.fsum``), so results do not
depend on client order or on the BLAS in use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .connectivity import ConnectivityModel, LinkRealization, sample_realization

MODES = ("colrel", "blind", "nonblind", "perfect")

_GRAD, _LINK = 0, 1


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the ``keys`` sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(keys)))


def client_sum(weights, vectors) -> np.ndarray:
    """``sum_k weights[k] * vectors[k]`` with an exactly rounded sum over ``k``."""
    terms = np.asarray(weights, dtype=float)[:, None] * np.asarray(vectors, dtype=float)
    return np.array([math.fsum(col) for col in terms.T.tolist()])


@dataclass
class Schedule:
    """Round structure and step-size rule.

    ``step_rule="theory"`` uses ``eta_r = 4 / (mu * (r * local_steps + 1))``.
    """

    rounds: int
    local_steps: int = 1
    step_rule: str = "constant"
    lr: float = 0.05
    mu: Optional[float] = None
    momentum: float = 0.0
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.rounds < 1 or self.local_steps < 1:
            raise ValueError("rounds and local_steps must be >= 1")
        if self.step_rule == "constant":
            if not self.lr > 0:
                raise ValueError("lr must be positive")
        elif self.step_rule == "theory":
            if self.mu is None or not self.mu > 0:
                raise ValueError("theory step-size rule needs mu > 0")
        else:
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def step_size(self, r: int) -> float:
        if self.step_rule == "theory":
            return 4.0 / (self.mu * (r * self.local_steps + 1))
        return self.lr


@dataclass
class RoundTrace:
    seed: int
    mode: str
    dist_sq: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    uplink_successes: list = field(default_factory=list)
    models: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def rows(self):
        for r in range(len(self)):
            yield r, self.dist_sq[r], self.loss[r], self.uplink_successes[r], self.seed


def local_round(obj, i, x_global, eta, T, rng, batch_size=None) -> np.ndarray:
    """Run ``T`` local SGD steps from ``x_global`` and return the model change."""
    x = np.array(x_global, dtype=float)
    for _ in range(T):
        x = x - eta * obj.stochastic_gradient(i, x, rng, batch_size)
    return x - x_global


def relay_combine(A, real: LinkRealization, deltas) -> np.ndarray:
    """Each client's transmission ``sum_j tau[j, i] * A[i, j] * deltas[j]``."""
    coef = np.asarray(A, dtype=float) * np.asarray(real.tau, dtype=float).T
    deltas = np.asarray(deltas, dtype=float)
    return np.array([client_sum(row, deltas) for row in coef])


def aggregate(x, real: LinkRealization, inputs, mode, beta=0.0, momentum=None):
    """PS update; returns ``(x_new, momentum_new)``.

    ``colrel`` and ``blind`` sum whatever arrived and divide by ``n``;
    ``nonblind`` divides by the number of arrivals; ``perfect`` ignores link
    failures. The step is passed through heavy-ball momentum ``v = beta v + u``.
    """
    inputs = np.asarray(inputs, dtype=float)
    n = len(inputs)
    up = np.asarray(real.tau_up, dtype=float)
    if mode in ("colrel", "blind"):
        u = client_sum(up, inputs) / n
    elif mode == "nonblind":
        k = int(up.sum())
        u = client_sum(up, inputs) / k if k else np.zeros(inputs.shape[1])
    elif mode == "perfect":
        u = client_sum(np.ones(n), inputs) / n
    else:
        raise ValueError(f"unknown mode {mode!r}")
    v = u if momentum is None else beta * momentum + u
    return np.asarray(x) + v, v


def run_simulation(model: ConnectivityModel, A, obj, schedule: Schedule, mode: str, seed: int,
                   x0=None, keep_models=False) -> RoundTrace:
    """Simulate ``schedule.rounds`` rounds of one aggregation mode.

    ``A`` is only used by ``colrel``. Metrics are recorded for the initial model
    (round 0) and after each round; ``dist_sq`` is NaN when the objective has no
    known minimiser.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if model.n != obj.n:
        raise ValueError(f"model has {model.n} clients, objective {obj.n}")
    if mode == "colrel":
        if A is None:
            raise ValueError("colrel needs a weight matrix")
        A = np.asarray(A, dtype=float)
    x = np.zeros(obj.d) if x0 is None else np.array(x0, dtype=float)
    v = np.zeros(obj.d)
    trace = RoundTrace(seed=seed, mode=mode)

    def record(succ):
        trace.loss.append(obj.loss(x))
        trace.dist_sq.append(float(np.sum((x - obj.x_star) ** 2)) if obj.x_star is not None else math.nan)
        trace.uplink_successes.append(succ)
        if keep_models:
            trace.models.append(x.copy())

    record(0)
    for r in range(schedule.rounds):
        eta = schedule.step_size(r)
        deltas = np.array([
            local_round(obj, i, x, eta, schedule.local_steps, stream(seed, _GRAD, r, i), schedule.batch_size)
            for i in range(obj.n)
        ])
        real = sample_realization(model, stream(seed, _LINK, r))
        inputs = relay_combine(A, real, deltas) if mode == "colrel" else deltas
        x, v = aggregate(x, real, inputs, mode, schedule.momentum, v)
        record(obj.n if mode == "perfect" else int(real.tau_up.sum()))
    return trace


def effective_weights(A, tau_up, tau) -> np.ndarray:
    """Total PS weight on each client's update: ``W_i = sum_j tau_j tau[i, j] A[j, i]``.

    Accepts single realisations or stacked batches (leading sample axis).
    """
    return np.einsum("...j,...ij,ji->...i", np.asarray(tau_up, float), np.asarray(tau, float), np.asarray(A, float))
