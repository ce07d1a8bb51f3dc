"""Closed-form variance of the effective PS weights and the convergence bound.

``closed_form_covariance`` and ``enumerate_covariance`` compute the same
matrix ``E[(W_i - 1)(W_l - 1)]`` by independent routes: the first from the
pairwise moment formulas, the second by summing over every joint link outcome.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .connectivity import ConnectivityModel, sample_realizations
from .protocol import Schedule, effective_weights, run_simulation
from .weights import relay_reach, s_value, unbiasedness_residuals

MAX_ENUM_N = 5


def closed_form_covariance(m: ConnectivityModel, A, tol=1e-9) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    res = unbiasedness_residuals(m, A)
    if np.max(np.abs(res)) > tol:
        raise ValueError(f"weights violate unbiasedness (max residual {np.max(np.abs(res)):.3g})")
    p, P, E = m.p, m.P, m.E
    C = relay_reach(m)
    # sum_j p_j (1 - p_j) P[i, j] P[l, j] A[j, i] A[j, l]
    B = P.T * A
    cov = np.einsum("j,ji,jl->il", p * (1 - p), B, B)
    cov += np.outer(p, p) * (E - P * P.T) * A.T * A
    np.fill_diagonal(cov, np.sum(C * (1 - C) * A ** 2, axis=0))
    return cov


def _pair_outcomes(m):
    """Per unordered pair, the nonzero-probability outcomes of ``(tau_ij, tau_ji)``."""
    pairs = []
    for i in range(m.n):
        for j in range(i + 1, m.n):
            pij, pji, e = m.P[i, j], m.P[j, i], m.E[i, j]
            table = [((1, 1), e), ((1, 0), pij - e), ((0, 1), pji - e), ((0, 0), 1 - pij - pji + e)]
            pairs.append((i, j, [(o, w) for o, w in table if w > 0]))
    return pairs


def enumerate_covariance(m: ConnectivityModel, A) -> np.ndarray:
    """Exact ``E[(W_i - 1)(W_l - 1)]`` by brute-force enumeration (``n <= 5``)."""
    n = m.n
    if n > MAX_ENUM_N:
        raise ValueError(f"enumeration limited to n <= {MAX_ENUM_N}, got {n}")
    A = np.asarray(A, dtype=float)

    up_choices = [[(v, w) for v, w in ((1, pi), (0, 1 - pi)) if w > 0] for pi in m.p]
    ups, up_w = [], []
    for combo in itertools.product(*up_choices):
        ups.append([v for v, _ in combo])
        up_w.append(math.prod(w for _, w in combo))
    ups, up_w = np.array(ups, dtype=float), np.array(up_w)

    pairs = _pair_outcomes(m)
    taus, tau_w = [], []
    for combo in itertools.product(*[outs for _, _, outs in pairs]):
        t = np.eye(n)
        w = 1.0
        for (i, j, _), ((a, b), pw) in zip(pairs, combo):
            t[i, j], t[j, i] = a, b
            w *= pw
        taus.append(t)
        tau_w.append(w)
    taus, tau_w = np.array(taus), np.array(tau_w)

    # W[u, k, i] = sum_j up[u, j] tau[k, i, j] A[j, i]
    W = np.einsum("uj,kij,ji->uki", ups, taus, A)
    D = W - 1.0
    return np.einsum("u,k,uki,ukl->il", up_w, tau_w, D, D)


@dataclass(frozen=True)
class TheoryConstants:
    S: float
    B: float
    r0: float
    C1: float
    C2: float
    C3: float


def compute_constants(m: ConnectivityModel, A, L, mu, sigma2, T, n=None) -> TheoryConstants:
    if not mu > 0:
        raise ValueError("mu must be positive")
    n = m.n if n is None else n
    S = s_value(m, A)
    e = math.e
    B = 2 * L ** 2 * S / n ** 2
    r0 = max(L / mu, 4 * (B / mu ** 2 + 1), 1 / T, 4 * n / (mu ** 2 * T))
    C1 = 16 / mu ** 2 * 2 * sigma2 / n ** 2 * S
    C2 = 16 / mu ** 2 * L ** 2 * sigma2 * e / n
    C3 = 256 / mu ** 4 * (L ** 2 * sigma2 * e + 2 * L ** 2 * sigma2 * e * S / n ** 2)
    return TheoryConstants(S, B, r0, C1, C2, C3)


def theorem_bound(c: TheoryConstants, D0, T, r) -> float:
    """Upper bound on ``E||x^(r+1) - x*||^2`` for round ``r >= r0``."""
    if r < c.r0:
        raise ValueError(f"bound only holds for r >= r0 = {c.r0:g}, got {r}")
    q = r * T + 1
    return ((c.r0 * T + 1) / q ** 2 * D0 + c.C1 * T / q + c.C2 * (T - 1) ** 2 / q
            + c.C3 * (T - 1) / q ** 2)


def unbiasedness_monte_carlo(m: ConnectivityModel, A, samples, rng, chunk=20000):
    """Sample mean and standard error of each effective weight ``W_i``."""
    total = np.zeros(m.n)
    total_sq = np.zeros(m.n)
    left = samples
    while left:
        k = min(chunk, left)
        tau_up, tau = sample_realizations(m, rng, k)
        W = effective_weights(A, tau_up, tau)
        total += W.sum(axis=0)
        total_sq += (W ** 2).sum(axis=0)
        left -= k
    mean = total / samples
    var = (total_sq - samples * mean ** 2) / (samples - 1)
    return mean, np.sqrt(np.maximum(var, 0) / samples)


def monte_carlo_covariance(m: ConnectivityModel, A, samples, rng) -> np.ndarray:
    tau_up, tau = sample_realizations(m, rng, samples)
    D = effective_weights(A, tau_up, tau) - 1.0
    return D.T @ D / samples


def bound_curve(model, A, obj, schedule: Schedule, seeds, x0=None):
    """Empirical ``E||x^(r+1) - x*||^2`` against the bound for every ``r`` in ``[ceil(r0), rounds)``.

    Returns rows ``(r, bound, empirical_mean, empirical_stderr)`` where the
    empirical values refer to the model after round ``r``.
    """
    if schedule.step_rule != "theory":
        raise ValueError("the bound assumes the theory step-size rule")
    consts = compute_constants(model, A, obj.L, obj.mu, obj.sigma2, schedule.local_steps)
    x0 = np.zeros(obj.d) if x0 is None else np.asarray(x0, dtype=float)
    D0 = float(np.sum((x0 - obj.x_star) ** 2))
    runs = np.array([run_simulation(model, A, obj, schedule, "colrel", s, x0=x0).dist_sq for s in seeds])
    mean = runs.mean(axis=0)
    stderr = runs.std(axis=0, ddof=1) / np.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros_like(mean)
    rows = []
    for r in range(math.ceil(consts.r0), schedule.rounds):
        rows.append((r, theorem_bound(consts, D0, schedule.local_steps, r), mean[r + 1], stderr[r + 1]))
    return consts, rows


def write_bound_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "bound", "empirical_mean", "empirical_stderr"])
        for r, b, mu, se in rows:
            w.writerow([r, f"{b:.17g}", f"{mu:.17g}", f"{se:.17g}"])
