"""Relay-weight optimisation.

``A[j, i]`` is the weight client ``j`` applies to the update of client ``i``
before forwarding it to the PS, so column ``A[:, i]`` collects every weight
given to client ``i``. A column is unbiased when
``sum_j p_j * P[i, j] * A[j, i] == 1``.

The optimiser runs cyclic column-wise (Gauss-Seidel) minimisation, first on
the convex surrogate ``s_bar_value`` and then, warm-started, on the exact
variance functional ``s_value``. Every column subproblem is a separable
quadratic with one linear equality, solved in closed form up to the scalar
multiplier, which is located by bisection.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .connectivity import ConnectivityModel

BISECT_TOL = 1e-12
BISECT_MAX_ITER = 200
EARLY_STOP = 1e-10


class InfeasibleModelError(ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"clients {self.columns} cannot reach the PS directly or through any relay")


class BracketError(RuntimeError):
    pass


@dataclass
class SolverReport:
    sweeps_relaxed: int = 0
    sweeps_finetune: int = 0
    s_bar: float = float("nan")
    s: float = float("nan")
    max_residual: float = float("nan")
    unreachable: list = field(default_factory=list)
    trace_relaxed: list = field(default_factory=list)
    trace_finetune: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def relay_reach(m: ConnectivityModel) -> np.ndarray:
    """``C[j, i] = p_j * P[i, j]``: probability that client ``i``'s update reaches the PS via ``j``."""
    return m.p[:, None] * m.P.T


def feasibility_check(m: ConnectivityModel) -> list[int]:
    """Clients whose column has no positive ``p_j * P[i, j]``; empty when every column is feasible."""
    return [int(i) for i in np.flatnonzero(~np.any(relay_reach(m) > 0, axis=0))]


def _require_feasible(m):
    bad = feasibility_check(m)
    if bad:
        raise InfeasibleModelError(bad)


def init_weights(m: ConnectivityModel, unreachable="raise") -> np.ndarray:
    """Feasible starting point: column ``i`` spreads its unit mass evenly over its usable relays.

    With ``unreachable="drop"`` clients without any path keep an all-zero column.
    """
    if unreachable == "raise":
        _require_feasible(m)
    elif unreachable != "drop":
        raise ValueError(f"unreachable must be 'raise' or 'drop', got {unreachable!r}")
    C = relay_reach(m)
    usable = C > 0
    count = usable.sum(axis=0)
    A = np.zeros_like(C)
    A[usable] = 1.0 / (np.broadcast_to(count, C.shape)[usable] * C[usable])
    return A


def unbiasedness_residuals(m: ConnectivityModel, A) -> np.ndarray:
    return (relay_reach(m) * np.asarray(A)).sum(axis=0) - 1.0


def _recip_gap(m):
    # p_i * p_l * (E_il - P_il * P_li)
    return np.outer(m.p, m.p) * (m.E - m.P * m.P.T)


def _shared_terms(m, A):
    p, P = m.p, m.P
    row = (A * P.T).sum(axis=1)                      # sum_i P[i, j] A[j, i]
    first = np.sum(p * (1 - p) * row ** 2)
    second = np.sum(p[:, None] * P.T * (1 - P.T) * A ** 2)
    return first + second


def s_value(m: ConnectivityModel, A) -> float:
    """Variance functional S(p, P, A) of the effective PS weights."""
    A = np.asarray(A, dtype=float)
    return float(_shared_terms(m, A) + np.sum(_recip_gap(m) * A * A.T))


def s_bar_value(m: ConnectivityModel, A) -> float:
    """Convex upper bound of ``s_value``: the reciprocity cross term ``A_il A_li`` becomes ``A_li**2``."""
    A = np.asarray(A, dtype=float)
    return float(_shared_terms(m, A) + np.sum(_recip_gap(m) * A.T ** 2))


def bisect_lambda(g: Callable[[float], float], lo: float, hi: float,
                  tol: float = BISECT_TOL, max_iter: int = BISECT_MAX_ITER) -> float:
    """Find ``lam`` in ``[lo, hi]`` with ``g(lam) == 1`` for nondecreasing ``g``.

    Returns as soon as ``|g(lam) - 1| <= tol``; after ``max_iter`` halvings the
    best midpoint seen is returned.
    """
    g_lo, g_hi = g(lo), g(hi)
    if abs(g_lo - 1.0) <= tol:
        return lo
    if abs(g_hi - 1.0) <= tol:
        return hi
    if g_hi < 1.0:
        raise BracketError(f"g(hi={hi!r}) = {g_hi!r} < 1: bad upper bound")
    if g_lo > 1.0:
        raise BracketError(f"g(lo={lo!r}) = {g_lo!r} > 1: bad lower bound")
    best, best_err = lo, abs(g_lo - 1.0)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        val = g(mid)
        err = abs(val - 1.0)
        if err < best_err:
            best, best_err = mid, err
        if err <= tol:
            return mid
        if val < 1.0:
            lo = mid
        else:
            hi = mid
    return best


def column_map(m: ConnectivityModel, A: np.ndarray, i: int, finetune: bool):
    """Closed-form column ``i`` as a function of the multiplier, for the case with no sure relay.

    Returns ``(entries, c, hi)``: ``entries(lam)`` gives the full column,
    ``c`` the reach probabilities ``p_j * P[i, j]`` and ``hi`` an upper
    bracket for the multiplier. Each entry is a clamped increasing affine
    function of ``lam``, so ``c @ entries(lam)`` is nondecreasing.
    """
    p, P, E = m.p, m.P, m.E
    n = m.n
    c = p * P[i]                                      # c[j] = p_j * P[i, j]
    act = np.flatnonzero(c > 0)
    if len(act) == 0:
        raise InfeasibleModelError([i])
    ca = c[act]
    if ca.max() >= 1.0:
        raise ValueError(f"column {i} has a sure relay; no multiplier needed")
    others = np.ones(n, dtype=bool)
    others[i] = False
    # (1 - p_j) * sum_{l != i} P[l, j] A[j, l]
    cross = (1 - p[act]) * (A[act][:, others] * P[others][:, act].T).sum(axis=1)
    recip = p[i] * (E[i, act] / P[i, act] - P[act, i])
    if finetune:
        denom = 2.0 * (1.0 - ca)
        offset = 2.0 * cross + 2.0 * recip * A[i, act]
    else:
        denom = 2.0 * ((1.0 - ca) + recip)
        offset = 2.0 * cross
    if np.any(denom <= 0):
        raise ValueError(f"nonpositive curvature in column {i}; is E >= P * P.T?")
    # at this multiplier every entry is at least 1/c_j, so the constraint is met
    hi = float(np.max(denom / ca + offset))

    def entries(lam):
        col = np.zeros(n)
        col[act] = np.maximum(0.0, (lam - offset) / denom)
        return col

    return entries, c, hi


def _column(m: ConnectivityModel, A: np.ndarray, i: int, finetune: bool) -> np.ndarray:
    c = m.p * m.P[i]
    cmax = c.max()
    if cmax <= 0:
        raise InfeasibleModelError([i])
    if cmax >= 1.0:
        # free relays: zero-variance paths carry all the mass
        col = np.zeros(m.n)
        sure = c >= 1.0
        col[sure] = 1.0 / np.count_nonzero(sure)
        return col
    entries, c, hi = column_map(m, A, i, finetune)
    lam = bisect_lambda(lambda lam: float(np.dot(c, entries(lam))), 0.0, hi)
    return entries(lam)


def solve_column_relaxed(m: ConnectivityModel, A_prev, i: int) -> np.ndarray:
    """Exact minimiser over column ``i`` of ``s_bar_value`` with the other columns held fixed."""
    return _column(m, np.asarray(A_prev, dtype=float), i, finetune=False)


def solve_column_finetune(m: ConnectivityModel, A_prev, i: int) -> np.ndarray:
    """Exact minimiser over column ``i`` of ``s_value`` with the other columns held fixed."""
    return _column(m, np.asarray(A_prev, dtype=float), i, finetune=True)


def _phase(m, A, sweeps, finetune, callback, trace, columns):
    objective = s_value if finetune else s_bar_value
    done = 0
    for sweep in range(sweeps):
        change = 0.0
        for i in columns:
            col = _column(m, A, i, finetune)
            change = max(change, float(np.max(np.abs(col - A[:, i]))))
            A[:, i] = col
            if callback is not None:
                callback("finetune" if finetune else "relaxed", sweep, i, A)
        done = sweep + 1
        trace.append(objective(m, A))
        if change < EARLY_STOP:
            break
    return done


def optimize_weights(m: ConnectivityModel, sweeps: Optional[int] = None, callback=None,
                     unreachable: str = "raise"):
    """Two-phase Gauss-Seidel optimisation of the relay weights.

    Parameters
    ----------
    m : ConnectivityModel
    sweeps : int, optional
        Maximum number of full column sweeps per phase (default ``50 * n``).
        A phase stops early once a sweep changes no entry by more than 1e-10.
    callback : callable, optional
        Called as ``callback(phase, sweep, i, A)`` after every column update,
        with ``phase`` in ``{"relaxed", "finetune"}``. ``A`` is the live
        iterate; copy it if you keep it.
    unreachable : {"raise", "drop"}
        ``"raise"`` rejects models in which some client has no path to the PS.
        ``"drop"`` leaves those columns at zero (the PS never hears from them)
        and lists them in ``report.unreachable``; the other columns are still
        unbiased.

    Returns
    -------
    A : ndarray, shape (n, n)
    report : SolverReport
    """
    sweeps = 50 * m.n if sweeps is None else int(sweeps)
    A = init_weights(m, unreachable)
    dropped = feasibility_check(m)
    columns = [i for i in range(m.n) if i not in dropped]
    report = SolverReport(unreachable=dropped)
    report.sweeps_relaxed = _phase(m, A, sweeps, False, callback, report.trace_relaxed, columns)
    report.sweeps_finetune = _phase(m, A, sweeps, True, callback, report.trace_finetune, columns)
    report.s_bar = s_bar_value(m, A)
    report.s = s_value(m, A)
    res = unbiasedness_residuals(m, A)[columns]
    report.max_residual = float(np.max(np.abs(res))) if len(res) else 0.0
    return A, report


def save_weights_csv(A, path) -> None:
    """Row ``i`` holds the weights client ``i`` applies to every client's update."""
    np.savetxt(path, np.asarray(A), delimiter=",", fmt="%.17g")


def load_weights_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def save_weights_json(A, path) -> None:
    Path(path).write_text(json.dumps({"A": np.asarray(A).tolist()}))


def load_weights_json(path) -> np.ndarray:
    return np.array(json.loads(Path(path).read_text())["A"], dtype=float)
