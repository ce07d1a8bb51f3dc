"""Desk-scale ERM objectives with stochastic-gradient oracles.

Two families are provided: a strongly convex quadratic whose constants and
minimiser are known exactly (used for the theory checks), and multinomial
logistic regression on synthetic Gaussian-cluster data (used for non-IID
experiments with label-skewed shards).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax


class Objective:
    """Common interface: ``f(x) = mean_i f_i(x)`` over ``n`` clients in dimension ``d``."""

    n: int
    d: int
    L: float
    mu: float
    sigma2: float
    x_star: np.ndarray | None = None

    def client_loss(self, i, x) -> float:
        raise NotImplementedError

    def client_grad(self, i, x) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(self, i, x, rng, batch_size=None) -> np.ndarray:
        raise NotImplementedError

    def loss(self, x) -> float:
        return float(np.mean([self.client_loss(i, x) for i in range(self.n)]))

    def grad(self, x) -> np.ndarray:
        return np.mean([self.client_grad(i, x) for i in range(self.n)], axis=0)


class QuadraticObjective(Objective):
    """``f_i(x) = 0.5 (x - c_i)^T Q (x - c_i)`` with bounded additive gradient noise.

    The noise is isotropic Gaussian with per-coordinate scale ``sigma / sqrt(d)``,
    truncated at three scales, so ``E||g_i - grad f_i||^2 <= sigma**2``.
    """

    def __init__(self, centers, Q, sigma=0.0):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.n, self.d = self.centers.shape
        if self.Q.shape != (self.d, self.d) or not np.allclose(self.Q, self.Q.T):
            raise ValueError("Q must be a symmetric (d, d) matrix")
        eig = np.linalg.eigvalsh(self.Q)
        if eig[0] <= 0:
            raise ValueError(f"Q is not positive definite (min eigenvalue {eig[0]:g})")
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.mu, self.L = float(eig[0]), float(eig[-1])
        self.sigma = float(sigma)
        self.sigma2 = self.sigma ** 2
        self.x_star = self.centers.mean(axis=0)

    @property
    def homogeneous(self) -> bool:
        return bool(np.all(self.centers == self.centers[0]))

    def client_loss(self, i, x):
        r = np.asarray(x) - self.centers[i]
        return 0.5 * float(r @ self.Q @ r)

    def client_grad(self, i, x):
        return self.Q @ (np.asarray(x) - self.centers[i])

    def noise(self, rng):
        z = rng.standard_normal(self.d)
        bad = np.abs(z) > 3.0
        while np.any(bad):
            z[bad] = rng.standard_normal(np.count_nonzero(bad))
            bad = np.abs(z) > 3.0
        return z * (self.sigma / np.sqrt(self.d))

    def stochastic_gradient(self, i, x, rng, batch_size=None):
        g = self.client_grad(i, x)
        if self.sigma == 0:
            return g
        return g + self.noise(rng)


def make_quadratic(d, n, centers, Q, sigma=0.0) -> QuadraticObjective:
    obj = QuadraticObjective(centers, Q, sigma)
    if obj.d != d or obj.n != n:
        raise ValueError(f"centers have shape {obj.centers.shape}, expected ({n}, {d})")
    return obj


def random_quadratic(d, n, mu, L, sigma, rng, spread=0.0, offset=0.0) -> QuadraticObjective:
    """Quadratic with eigenvalues ``linspace(mu, L, d)`` in a random basis.

    Client centres are ``offset * 1 + spread * N(0, I)``; ``spread=0`` gives the
    homogeneous case in which every client shares the minimiser.
    """
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    Q = basis @ np.diag(np.linspace(mu, L, d)) @ basis.T
    Q = 0.5 * (Q + Q.T)
    base = np.full(d, float(offset))
    centers = base + spread * rng.standard_normal((n, d)) if spread else np.tile(base, (n, 1))
    return QuadraticObjective(centers, Q, sigma)


@dataclass
class Partition:
    shards: list
    s: int | None = None

    def to_json(self) -> str:
        return json.dumps({"s": self.s, "shards": [np.asarray(sh).tolist() for sh in self.shards]})

    @classmethod
    def from_json(cls, text) -> "Partition":
        d = json.loads(text)
        return cls([np.array(sh, dtype=int) for sh in d["shards"]], d.get("s"))


def sort_and_partition(labels, n, s, rng) -> Partition:
    """Sort samples by label, cut into ``n * s`` equal blocks and deal ``s`` random blocks per client.

    Every block must be label-pure so that a client never sees more than ``s``
    labels; a ``ValueError`` is raised when the label counts do not allow it.
    """
    labels = np.asarray(labels)
    N = len(labels)
    blocks = n * s
    if n < 1 or s < 1 or N % blocks:
        raise ValueError(f"{N} samples cannot be cut into n*s = {blocks} equal blocks")
    order = np.argsort(labels, kind="stable")
    cut = order.reshape(blocks, N // blocks)
    for b in cut:
        if len(np.unique(labels[b])) > 1:
            raise ValueError(f"(n={n}, s={s}) gives blocks spanning several labels; "
                             "label counts must be multiples of the block size")
    perm = rng.permutation(blocks)
    shards = [np.sort(np.concatenate(cut[perm[k * s:(k + 1) * s]])) for k in range(n)]
    return Partition(shards, s)


def iid_partition(N, n, rng) -> Partition:
    if N % n:
        raise ValueError(f"{N} samples cannot be split into {n} equal shards")
    return Partition([np.sort(sh) for sh in rng.permutation(N).reshape(n, -1)])


def synthetic_classification(samples, features, label_count, rng, separation=3.0):
    """Gaussian clusters with unit covariance; class balanced when ``label_count`` divides ``samples``."""
    means = separation * rng.standard_normal((label_count, features)) / np.sqrt(features)
    y = np.arange(samples) % label_count
    X = means[y] + rng.standard_normal((samples, features))
    return X, y


class LogisticObjective(Objective):
    """Multinomial logistic regression with ridge penalty ``l2/2 ||x||^2``.

    The parameter vector is a flattened ``(features + 1, label_count)`` matrix
    (last row is the bias).
    """

    def __init__(self, X, y, partition: Partition, label_count, l2=1e-4, solve=True):
        if label_count < 2:
            raise ValueError("need at least two labels")
        self.X = np.hstack([np.asarray(X, dtype=float), np.ones((len(X), 1))])
        self.y = np.asarray(y, dtype=int)
        if self.y.min() < 0 or self.y.max() >= label_count:
            raise ValueError("labels must lie in [0, label_count)")
        self.K = int(label_count)
        self.partition = partition
        self.shards = [np.asarray(sh, dtype=int) for sh in partition.shards]
        if any(len(sh) == 0 for sh in self.shards):
            raise ValueError("empty shard")
        self.n = len(self.shards)
        self.d = self.X.shape[1] * self.K
        self.l2 = float(l2)
        self.mu = self.l2
        # Hessian of the softmax cross-entropy is bounded by 0.5 * (a a^T) per sample
        self.L = max(0.5 * np.linalg.eigvalsh(self.X[sh].T @ self.X[sh] / len(sh))[-1]
                     for sh in self.shards) + self.l2
        # single-sample loss gradient satisfies ||g||^2 <= 2 ||a||^2
        self.sigma2 = float(2.0 * np.max(np.sum(self.X ** 2, axis=1)))
        self.x_star = self._solve() if solve else None

    def _batch_loss_grad(self, idx, x):
        W = np.asarray(x).reshape(-1, self.K)
        Z = self.X[idx] @ W
        lse = logsumexp(Z, axis=1)
        loss = np.mean(lse - Z[np.arange(len(idx)), self.y[idx]]) + 0.5 * self.l2 * float(x @ x)
        G = softmax(Z, axis=1)
        G[np.arange(len(idx)), self.y[idx]] -= 1.0
        grad = (self.X[idx].T @ G).ravel() / len(idx) + self.l2 * x
        return float(loss), grad

    def client_loss(self, i, x):
        return self._batch_loss_grad(self.shards[i], np.asarray(x, dtype=float))[0]

    def client_grad(self, i, x):
        return self._batch_loss_grad(self.shards[i], np.asarray(x, dtype=float))[1]

    def loss(self, x):
        # equal shard sizes make this the mean of client losses
        return self._batch_loss_grad(np.concatenate(self.shards), np.asarray(x, dtype=float))[0]

    def grad(self, x):
        return self._batch_loss_grad(np.concatenate(self.shards), np.asarray(x, dtype=float))[1]

    def stochastic_gradient(self, i, x, rng, batch_size=None):
        shard = self.shards[i]
        if batch_size is None or batch_size >= len(shard):
            idx = shard
        else:
            if batch_size < 1:
                raise ValueError("batch_size must be positive")
            idx = rng.choice(shard, size=batch_size, replace=False)
        return self._batch_loss_grad(idx, np.asarray(x, dtype=float))[1]

    def _solve(self):
        all_idx = np.concatenate(self.shards)
        res = minimize(lambda w: self._batch_loss_grad(all_idx, w), np.zeros(self.d),
                       jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-10, "ftol": 1e-15})
        return res.x


def make_logistic_synthetic(features, n, samples_per_client, label_count, partition="iid",
                            l2_coeff=1e-4, rng=None, separation=3.0) -> LogisticObjective:
    """Synthetic classification task split over ``n`` clients.

    ``partition`` is ``"iid"`` or an integer skew ``s`` for sort-and-partition.
    """
    if min(features, n, samples_per_client, label_count) < 1:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng() if rng is None else rng
    X, y = synthetic_classification(n * samples_per_client, features, label_count, rng, separation)
    if partition == "iid":
        part = iid_partition(len(y), n, rng)
    else:
        part = sort_and_partition(y, n, int(partition), rng)
    return LogisticObjective(X, y, part, label_count, l2_coeff)


def save_dataset_csv(X, y, path) -> None:
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{k}" for k in range(X.shape[1])] + ["label"])
        for row, lab in zip(X.tolist(), np.asarray(y).tolist()):
            w.writerow([repr(v) for v in row] + [int(lab)])


def load_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = list(reader)
    X = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    return X, y


def save_partition(part: Partition, path) -> None:
    Path(path).write_text(part.to_json())


def load_partition(path) -> Partition:
    return Partition.from_json(Path(path).read_text())
