"""Intermittent client/PS and client/client link models.

A :class:`ConnectivityModel` holds the per-round success probabilities of the
uplinks (``p``), of the directed inter-client links (``P[i, j]`` is the
probability that a transmission from client ``i`` reaches client ``j``) and
the reciprocity cross-moments ``E[i, j] = E[tau_ij * tau_ji]``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TOL = 1e-12

#: Distance (m) at which the mmWave success probability drops to 0.99.
THRESHOLD_DISTANCE = 30.0 * (5.2 - np.log(0.99))


class InvalidModelError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid connectivity model: " + "; ".join(self.errors))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ConnectivityModel:
    p: np.ndarray
    P: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _frozen(self.p))
        object.__setattr__(self, "P", _frozen(self.P))
        object.__setattr__(self, "E", _frozen(self.E))

    @property
    def n(self) -> int:
        return len(self.p)

    def __eq__(self, other):
        if not isinstance(other, ConnectivityModel):
            return NotImplemented
        return (np.array_equal(self.p, other.p) and np.array_equal(self.P, other.P)
                and np.array_equal(self.E, other.E))

    def to_dict(self) -> dict:
        return {"n": self.n, "p": self.p.tolist(), "P": self.P.tolist(), "E": self.E.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConnectivityModel":
        m = cls(d["p"], d["P"], d["E"])
        if "n" in d and d["n"] != m.n:
            raise InvalidModelError([f"n={d['n']} does not match len(p)={m.n}"])
        return m


@dataclass(frozen=True, eq=False)
class LinkRealization:
    """One round of link outcomes: ``tau_up[i]`` (client to PS) and ``tau[i, j]`` (i to j)."""

    tau_up: np.ndarray
    tau: np.ndarray


def validate_model(m: ConnectivityModel) -> list[str]:
    """Return every violated model invariant; an empty list means the model is valid.

    Besides the Frechet bounds, the reciprocity cross-moment must satisfy
    ``E[i, j] >= P[i, j] * P[j, i]`` (links are never negatively correlated);
    the relaxed weight problem is only convex under that assumption.
    """
    errors = []
    n = m.n
    if m.p.ndim != 1 or m.P.shape != (n, n) or m.E.shape != (n, n):
        return [f"shape mismatch: p{m.p.shape}, P{m.P.shape}, E{m.E.shape}"]
    for name, arr in (("p", m.p), ("P", m.P), ("E", m.E)):
        if not np.all(np.isfinite(arr)):
            errors.append(f"{name} has non-finite entries")
        elif np.any(arr < 0) or np.any(arr > 1):
            errors.append(f"{name} has entries outside [0, 1]")
    if errors:
        return errors
    for i in np.flatnonzero(np.diag(m.P) != 1):
        errors.append(f"p_ii must be 1 (P[{i},{i}] = {m.P[i, i]:g})")
    if not np.array_equal(m.E, m.E.T):
        errors.append("E not symmetric")
    for i in np.flatnonzero(np.diag(m.E) != 1):
        errors.append(f"E_ii must be 1 (E[{i},{i}] = {m.E[i, i]:g})")
    for i in range(n):
        for j in range(i + 1, n):
            pij, pji, e = m.P[i, j], m.P[j, i], m.E[i, j]
            upper = min(pij, pji)
            if e > upper + TOL:
                errors.append(f"E[{i},{j}] = {e:g} exceeds min(P[{i},{j}], P[{j},{i}]) = {upper:g}")
            lower = max(0.0, pij + pji - 1.0)
            if e < lower - TOL:
                errors.append(f"E[{i},{j}] = {e:g} below Frechet bound max(0, P[{i},{j}] + P[{j},{i}] - 1) = {lower:g}")
            elif e < pij * pji - TOL:
                errors.append(f"E[{i},{j}] = {e:g} below independence product P[{i},{j}]*P[{j},{i}] = {pij * pji:g}")
    return errors


def ensure_valid(m: ConnectivityModel) -> ConnectivityModel:
    errors = validate_model(m)
    if errors:
        raise InvalidModelError(errors)
    return m


def _check_prob(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return arr


def build_erdos_renyi(n, p_c, p_up, reciprocal=True, frozen=False, rng=None) -> ConnectivityModel:
    """Erdos-Renyi collaboration graph with edge probability ``p_c``.

    With ``reciprocal`` both directions of a pair fail together (``E = p_c``),
    otherwise they are independent (``E = p_c**2``). ``frozen=True`` draws the
    graph once from ``rng`` and returns a deterministic 0/1 model instead of
    re-drawing the links every round.
    """
    _check_prob("p_c", p_c)
    p_up = _check_prob("p_up", np.broadcast_to(np.asarray(p_up, dtype=float), (n,)))
    if frozen:
        if rng is None:
            raise ValueError("frozen Erdos-Renyi graph needs an rng")
        draws = rng.random((n, n)) < p_c
        if reciprocal:
            upper = np.triu(draws, 1)
            draws = upper | upper.T
        adj = draws.astype(float)
        np.fill_diagonal(adj, 1.0)
        return ensure_valid(ConnectivityModel(p_up, adj, adj * adj.T))
    P = np.full((n, n), float(p_c))
    np.fill_diagonal(P, 1.0)
    E = P.copy() if reciprocal else P * P.T
    np.fill_diagonal(E, 1.0)
    return ensure_valid(ConnectivityModel(p_up, P, E))


def mmwave_probability(dist):
    """Link success probability ``min(1, exp(-d/30 + 5.2))`` at distance ``d`` metres."""
    return np.minimum(1.0, np.exp(-np.asarray(dist, dtype=float) / 30.0 + 5.2))


def _distances(client_pos, ps_pos):
    pos = np.asarray(client_pos, dtype=float)
    ps = np.asarray(ps_pos, dtype=float)
    if pos.ndim != 2 or not np.all(np.isfinite(pos)) or not np.all(np.isfinite(ps)):
        raise ValueError("positions must be a finite (n, dim) array")
    d_up = np.linalg.norm(pos - ps, axis=1)
    d_cc = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    return d_up, d_cc


def build_mmwave(client_pos, ps_pos=(0.0, 0.0), prune_below=0.5, reciprocal=True) -> ConnectivityModel:
    """Distance-based mmWave blockage model; inter-client links below ``prune_below`` are dropped."""
    _check_prob("prune_below", prune_below)
    d_up, d_cc = _distances(client_pos, ps_pos)
    p = mmwave_probability(d_up)
    P = mmwave_probability(d_cc)
    P[P < prune_below] = 0.0
    np.fill_diagonal(P, 1.0)
    # symmetric distances give P == P.T; reciprocity means a blockage hits both directions
    E = P.copy() if reciprocal else P * P.T
    np.fill_diagonal(E, 1.0)
    return ensure_valid(ConnectivityModel(p, P, E))


def build_threshold(client_pos, ps_pos=(0.0, 0.0), level=0.99) -> ConnectivityModel:
    """Deterministic links: connected iff the mmWave probability at that distance is >= ``level``."""
    d_th = 30.0 * (5.2 - np.log(level))
    d_up, d_cc = _distances(client_pos, ps_pos)
    p = (d_up <= d_th).astype(float)
    P = (d_cc <= d_th).astype(float)
    np.fill_diagonal(P, 1.0)
    return ensure_valid(ConnectivityModel(p, P, P * P.T))


def random_model(n, rng, density=0.7, reciprocity=None) -> ConnectivityModel:
    """Random valid model, used by tests and the ``verify`` command.

    Off-diagonal links are present with probability ``density``; ``E`` is drawn
    uniformly between the independence product and ``min(P_ij, P_ji)`` unless
    ``reciprocity`` in [0, 1] pins the interpolation weight.
    """
    p = rng.uniform(0.05, 1.0, n)
    P = rng.uniform(0.05, 1.0, (n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(P, 1.0)
    E = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            lo, hi = P[i, j] * P[j, i], min(P[i, j], P[j, i])
            w = rng.random() if reciprocity is None else reciprocity
            E[i, j] = E[j, i] = lo + w * (hi - lo)
    return ensure_valid(ConnectivityModel(p, P, E))


def _pair_cells(m: ConnectivityModel):
    iu, ju = np.triu_indices(m.n, 1)
    pij, pji, e = m.P[iu, ju], m.P[ju, iu], m.E[iu, ju]
    # joint table of (tau_ij, tau_ji): cumulative thresholds for (1,1), (1,0), (0,1)
    t11 = e
    t10 = pij
    t01 = pij + pji - e
    return iu, ju, t11, t10, t01


def sample_realizations(m: ConnectivityModel, rng: np.random.Generator, size: int):
    """Draw ``size`` independent rounds; returns ``(tau_up, tau)`` of shapes (size, n), (size, n, n)."""
    n = m.n
    tau_up = (rng.random((size, n)) < m.p).astype(np.int8)
    iu, ju, t11, t10, t01 = _pair_cells(m)
    u = rng.random((size, len(iu)))
    both = u < t11
    fwd = both | ((u >= t11) & (u < t10))
    bwd = both | ((u >= t10) & (u < t01))
    tau = np.zeros((size, n, n), dtype=np.int8)
    tau[:, iu, ju] = fwd
    tau[:, ju, iu] = bwd
    tau[:, np.arange(n), np.arange(n)] = 1
    return tau_up, tau


def sample_realization(m: ConnectivityModel, rng: np.random.Generator) -> LinkRealization:
    tau_up, tau = sample_realizations(m, rng, 1)
    return LinkRealization(tau_up[0], tau[0])


def save_model(m: ConnectivityModel, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2))


def load_model(path) -> ConnectivityModel:
    return ensure_valid(ConnectivityModel.from_dict(json.loads(Path(path).read_text())))


def load_positions(path):
    """Read client positions from a CSV with header ``id,x,y``; rows are sorted by id."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "x", "y"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header id,x,y")
        for row in reader:
            rows.append((int(row["id"]), float(row["x"]), float(row["y"])))
    rows.sort()
    ids = [r[0] for r in rows]
    return ids, np.array([[r[1], r[2]] for r in rows])


def save_positions(pos, path, ids=None) -> None:
    pos = np.asarray(pos, dtype=float)
    ids = range(len(pos)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for k, (x, y) in zip(ids, pos):
            w.writerow([k, repr(float(x)), repr(float(y))])
