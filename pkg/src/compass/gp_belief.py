"""Per-target Gaussian-process beliefs over binary detections.

One independent GP per target, over spatio-temporal inputs (x, y, t) with
a separable Matern-5/2 product kernel (separate spatial and temporal
length scales). The prior mean is 0 ("target absent"); positive detections
pull the posterior mean toward 1.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from compass.errors import InvalidInputError, NumericsError

_SQRT5 = np.sqrt(5.0)


@dataclass
class KernelParams:
    sigma_f2: float = 1.0
    ell_s: float = 0.2
    ell_t: float = 40.0
    sigma_n2: float = 0.01

    def __post_init__(self):
        for name in ("sigma_f2", "ell_s", "ell_t", "sigma_n2"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"kernel parameter {name} must be > 0")


@dataclass(frozen=True)
class Observation:
    """A binary detection at a node position and decision step."""

    p: tuple[float, float]
    t: float
    y: float
    target_id: int

    def as_input(self) -> np.ndarray:
        return np.array([self.p[0], self.p[1], self.t])


def matern52(r: np.ndarray) -> np.ndarray:
    """Matern nu=5/2 profile (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r)."""
    r = np.asarray(r, dtype=float)
    return (1.0 + _SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-_SQRT5 * r)


def kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Covariance between input batches a (n,3) and b (m,3), columns (x, y, t)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    ds = np.sqrt(((a[:, None, :2] - b[None, :, :2]) ** 2).sum(-1))
    dt = np.abs(a[:, None, 2] - b[None, :, 2])
    return params.sigma_f2 * matern52(ds / params.ell_s) * matern52(dt / params.ell_t)


def matern_kernel(a: tuple, b: tuple, params: KernelParams) -> float:
    """Covariance between two ((x, y), t) inputs."""
    (pa, ta), (pb, tb) = a, b
    va = np.array([pa[0], pa[1], ta], dtype=float)
    vb = np.array([pb[0], pb[1], tb], dtype=float)
    return float(kernel_matrix(va[None], vb[None], params)[0, 0])


class TargetBelief:
    """GP state for one target: observation window plus a cached Cholesky factor.

    The factor of (K_XX + sigma_n^2 I) is rebuilt lazily on the first
    posterior call after any insertion or eviction; there are no rank-one
    updates (the window cap keeps a dense rebuild cheap).
    """

    def __init__(self, target_id: int, params: KernelParams,
                 w_max: int = 200, t_horizon: int = 50):
        self.target_id = target_id
        self.params = params
        self.w_max = w_max
        self.t_horizon = t_horizon
        self.window: list[Observation] = []
        self._times: list[float] = []
        self._factor = None
        self._alpha = None
        self._X = None

    def __len__(self) -> int:
        return len(self.window)

    def add_observation(self, obs: Observation) -> None:
        if obs.target_id != self.target_id:
            raise InvalidInputError(
                f"observation for target {obs.target_id} fed to belief {self.target_id}")
        pos = bisect.bisect_right(self._times, obs.t)  # keep window time-sorted
        self.window.insert(pos, obs)
        self._times.insert(pos, obs.t)
        if len(self.window) > self.w_max:
            self.window.pop(0)
            self._times.pop(0)
        self._invalidate()

    def prune_and_refresh(self, now: float) -> int:
        """Evict observations with t < now - t_horizon; returns eviction count."""
        cutoff = now - self.t_horizon
        keep = bisect.bisect_left(self._times, cutoff)
        if keep == 0:
            return 0
        del self.window[:keep]
        del self._times[:keep]
        self._invalidate()
        return keep

    def _invalidate(self) -> None:
        self._factor = None
        self._alpha = None
        self._X = None

    def _refresh_factor(self) -> None:
        X = np.array([o.as_input() for o in self.window])
        y = np.array([o.y for o in self.window])
        gram = kernel_matrix(X, X, self.params)
        noisy = gram + self.params.sigma_n2 * np.eye(len(X))
        try:
            factor = cho_factor(noisy, lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-8 * self.params.sigma_f2
            try:
                factor = cho_factor(noisy + jitter * np.eye(len(X)), lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericsError(
                    f"Cholesky failed for target {self.target_id} even with jitter "
                    f"{jitter:g} (window size {len(X)})") from exc
        self._factor = factor
        self._alpha = cho_solve(factor, y)
        self._X = X

    def posterior(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query inputs (Q, 3) of (x, y, t)."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if queries.size == 0:
            raise InvalidInputError("posterior requires at least one query")
        sf2 = self.params.sigma_f2
        if not self.window:
            q = len(queries)
            return np.zeros(q), np.full(q, sf2)
        if self._factor is None:
            self._refresh_factor()
        k_star = kernel_matrix(queries, self._X, self.params)
        mean = k_star @ self._alpha
        v = cho_solve(self._factor, k_star.T)
        var = sf2 - np.einsum("qn,nq->q", k_star, v)
        var = np.clip(var, 1e-18 * sf2, sf2)
        return mean, var


def node_posteriors(beliefs: list[TargetBelief], node_xy: np.ndarray,
                    t: float) -> tuple[np.ndarray, np.ndarray]:
    """Stacked posterior means/variances (n_targets, K) at all nodes for time t."""
    queries = np.column_stack([node_xy, np.full(len(node_xy), float(t))])
    means, variances = [], []
    for belief in beliefs:
        m, v = belief.posterior(queries)
        means.append(m)
        variances.append(v)
    return np.array(means), np.array(variances)


def export_belief_csv(path: str, node_means: np.ndarray, node_vars: np.ndarray) -> None:
    """Diagnostic snapshot: one row (target_id, node_id, mean, variance) per pair."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_id", "node_id", "mean", "variance"])
        n_targets, n_nodes = node_means.shape
        for j in range(n_targets):
            for v in range(n_nodes):
                writer.writerow([j, v, repr(float(node_means[j, v])),
                                 repr(float(node_vars[j, v]))])
