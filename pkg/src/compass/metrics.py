"""Episode evaluation metrics and multi-run aggregation.

Five scalars per episode: mean normalized posterior std (Avg Unc), mean
Jensen-Shannon divergence between belief and truth distributions over
nodes (Avg JSD), min/avg per-target visit counts, and belief-centroid
position RMSE. Each is a pure function of the episode log.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from compass.config import Config
from compass.errors import InvalidInputError
from compass.planners import make_planner
from compass.simulator import Simulation

MEAN_FLOOR = 1e-6


@dataclass
class EpisodeMetrics:
    avg_unc: float
    avg_jsd: float
    min_visits: int
    avg_visits: float
    rmse: float
    unc_trace: np.ndarray

    FIELDS = ("avg_unc", "avg_jsd", "min_visits", "avg_visits", "rmse")


def avg_uncertainty(var_history, sigma_f2: float) -> float:
    """Mean posterior std over (target, node, step), normalized by the prior std."""
    var_history = np.asarray(var_history)
    if var_history.size == 0:
        raise InvalidInputError("empty belief history")
    return float(np.mean(np.sqrt(var_history / sigma_f2)))


def uncertainty_trace(var_history, sigma_f2: float) -> np.ndarray:
    """Per-step mean normalized posterior std."""
    var_history = np.asarray(var_history)
    return np.sqrt(var_history / sigma_f2).mean(axis=(1, 2))


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JSD(P, Q) in nats; bounded by ln 2. Zero probabilities contribute zero."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mid = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, mid) + 0.5 * kl(q, mid)


def belief_distribution(means: np.ndarray) -> np.ndarray:
    """Per-node distribution from posterior means, floored to stay proper."""
    w = np.maximum(means, MEAN_FLOOR)
    return w / w.sum()


def truth_distribution(node_xy: np.ndarray, target_pos: np.ndarray,
                       r_sense: float) -> np.ndarray:
    """Gaussian bump of bandwidth r_sense around the true position, over nodes."""
    d2 = ((node_xy - target_pos) ** 2).sum(axis=1)
    w = np.exp(-d2 / (2.0 * r_sense ** 2))
    return w / w.sum()


def avg_jsd(mean_history, target_pos_history, node_xy: np.ndarray,
            r_sense: float) -> float:
    """Mean JSD between belief and truth distributions over (target, step)."""
    mean_history = np.asarray(mean_history)
    target_pos_history = np.asarray(target_pos_history)
    total, count = 0.0, 0
    for t in range(mean_history.shape[0]):
        for j in range(mean_history.shape[1]):
            p = belief_distribution(mean_history[t, j])
            q = truth_distribution(node_xy, target_pos_history[t, j], r_sense)
            total += jensen_shannon(p, q)
            count += 1
    return total / count


def visit_stats(detect_history) -> tuple[int, float]:
    """Per-target counts of steps with at least one successful observation.

    Simultaneous observers of the same target in one step count once.
    """
    det = np.asarray(detect_history)
    if det.size == 0:
        return 0, 0.0
    visits = (det.sum(axis=1) > 0).sum(axis=0)
    return int(visits.min()), float(visits.mean())


def rmse(mean_history, target_pos_history, node_xy: np.ndarray) -> float:
    """Belief-centroid position error, RMS over (target, step).

    Centroid weights are clipped posterior means; an all-nonpositive belief
    falls back to the uniform centroid.
    """
    mean_history = np.asarray(mean_history)
    target_pos_history = np.asarray(target_pos_history)
    sq = []
    for t in range(mean_history.shape[0]):
        for j in range(mean_history.shape[1]):
            w = np.maximum(mean_history[t, j], 0.0)
            total = w.sum()
            if total <= 0:
                centroid = node_xy.mean(axis=0)
            else:
                centroid = (w[:, None] * node_xy).sum(axis=0) / total
            sq.append(((centroid - target_pos_history[t, j]) ** 2).sum())
    return float(np.sqrt(np.mean(sq)))


def episode_metrics(sim: Simulation) -> EpisodeMetrics:
    """Compute every metric from a finished, recording episode."""
    sigma_f2 = sim.cfg.kernel.sigma_f2
    var_hist = np.asarray(sim.var_history)
    mean_hist = np.asarray(sim.mean_history)
    pos_hist = np.asarray(sim.target_pos_history)
    mn, avg = visit_stats(sim.detect_history)
    return EpisodeMetrics(
        avg_unc=avg_uncertainty(var_hist, sigma_f2),
        avg_jsd=avg_jsd(mean_hist, pos_hist, sim.graph.nodes, sim.cfg.sim.r_sense),
        min_visits=mn,
        avg_visits=avg,
        rmse=rmse(mean_hist, pos_hist, sim.graph.nodes),
        unc_trace=uncertainty_trace(var_hist, sigma_f2),
    )


def run_episode(cfg: Config, planner_name: str, seed: int, run_index: int = 0,
                net=None) -> tuple[EpisodeMetrics, Simulation]:
    """One seeded evaluation episode under the named planner."""
    sim = Simulation(cfg, master_seed=seed, env_index=run_index, mode="eval")
    rng = np.random.default_rng(np.random.SeedSequence((seed, run_index, 7_919)))
    planner = make_planner(planner_name, rng, net=net)
    planner.reset(sim)
    while not sim.episode_done():
        sim.advance(planner.step(sim))
    return episode_metrics(sim), sim


@dataclass
class EvaluationResult:
    planner: str
    runs: list[EpisodeMetrics]
    traces: np.ndarray  # (n_runs, B)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in EpisodeMetrics.FIELDS:
            vals = np.array([getattr(r, name) for r in self.runs], dtype=float)
            out[name] = (float(vals.mean()), float(vals.std()))
        return out

    def trace_mean_std(self) -> tuple[np.ndarray, np.ndarray]:
        return self.traces.mean(axis=0), self.traces.std(axis=0)


def evaluate(planner_name: str, cfg: Config, n_runs: int, seed: int,
             net=None, threads: int = 1,
             keep_sims: bool = False) -> EvaluationResult | tuple:
    """Run n_runs seeded episodes and aggregate (collect-then-reduce)."""
    if n_runs < 1:
        raise InvalidInputError("n_runs must be >= 1")

    def one(run_index: int):
        return run_episode(cfg, planner_name, seed, run_index=run_index, net=net)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_runs)))
    else:
        results = [one(i) for i in range(n_runs)]
    metrics = [m for m, _ in results]
    traces = np.stack([m.unc_trace for m in metrics])
    result = EvaluationResult(planner=planner_name, runs=metrics, traces=traces)
    if keep_sims:
        return result, [s for _, s in results]
    return result
