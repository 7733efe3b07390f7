"""Three-term curriculum-weighted step reward.

R(k) = a_info(k) * IG(k) - a_cov(k) * CP(k) - a_path(k) * PP(k), with the
weights linearly scheduled over normalized training progress
rho(k) = min(k / 20000, 1). All functions here are pure; the team shares
one reward value per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from compass.errors import InvalidInputError

CURRICULUM_STEPS = 20000


@dataclass(frozen=True)
class CurriculumWeights:
    alpha_info: float
    alpha_cov: float
    alpha_path: float
    rho: float


def curriculum_weights(k: int) -> CurriculumWeights:
    """Reward weights at global training decision step k."""
    if k < 0:
        raise InvalidInputError(f"training step must be >= 0, got {k}")
    rho = min(k / CURRICULUM_STEPS, 1.0)
    return CurriculumWeights(
        alpha_info=3.0 - 1.5 * rho,
        alpha_cov=0.1 + 0.3 * rho,
        alpha_path=0.05 + 0.05 * rho,
        rho=rho,
    )


def information_gain(prev_node_vars: np.ndarray, new_node_vars: np.ndarray,
                     sigma_f2: float) -> float:
    """Per-target total posterior-variance reduction across nodes.

    Summed over cells, floored at zero per cell (variance growth from time
    passing is not the agents' doing), divided by n_targets * sigma_f2 so
    the value is amplitude-free and comparable across team/target counts.
    Dividing by the node count as well would shrink the information term
    below the path penalty and invert the published weight balance.
    """
    prev = np.asarray(prev_node_vars, dtype=float)
    new = np.asarray(new_node_vars, dtype=float)
    if prev.shape != new.shape:
        raise InvalidInputError(f"variance shape mismatch: {prev.shape} vs {new.shape}")
    reduction = np.maximum(prev - new, 0.0).sum()
    return float(reduction / (prev.shape[0] * sigma_f2))


def coverage_penalty(observations, node_vars: np.ndarray, sigma_f2: float) -> float:
    """Redundancy penalty over (node, target) pairs observed by two or more agents.

    Each extra observer of a pair costs (1 - var/sigma_f2): re-observing a
    well-known location is penalized, piling onto an unknown one is free.
    ``observations`` is an iterable with .node and .target_id attributes (or
    (node, target) pairs); ``node_vars`` holds the pre-update variances.
    """
    counts: dict[tuple[int, int], int] = {}
    for obs in observations:
        if hasattr(obs, "node"):
            key = (obs.node, obs.target_id)
        else:
            key = (obs[0], obs[1])
        counts[key] = counts.get(key, 0) + 1
    penalty = 0.0
    for (node, target), n in counts.items():
        if n >= 2:
            penalty += (1.0 - node_vars[target, node] / sigma_f2) * (n - 1)
    return float(penalty)


def path_penalty(distances_traveled) -> float:
    """Sum of per-agent distances traveled this step."""
    return float(np.sum(distances_traveled))


def total_reward(k: int, ig: float, cp: float, pp: float) -> float:
    w = curriculum_weights(k)
    return w.alpha_info * ig - w.alpha_cov * cp - w.alpha_path * pp
