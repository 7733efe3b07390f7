"""Baseline action selectors plus the learned-policy wrapper.

All planners share one interface: ``step(sim) -> list of M neighbor node
ids``. Tie-breaking is deterministic everywhere (lowest id wins), so
baseline evaluations are bitwise reproducible.
"""

from __future__ import annotations

import itertools

import numpy as np

from compass.errors import InvalidInputError
from compass.simulator import Simulation
from compass.world_graph import WorldGraph, next_hop


def random_step(sim: Simulation, rng: np.random.Generator) -> list[int]:
    """Uniform choice over each agent's neighbor set, independent across agents."""
    actions = []
    for v in sim.agent_nodes:
        nbrs = sim.graph.adjacency[int(v)]
        actions.append(int(nbrs[rng.integers(len(nbrs))]))
    return actions


# -- coverage (lawnmower) ----------------------------------------------------


def _nearest_neighbor_tour(d: np.ndarray, start: int = 0) -> list[int]:
    K = len(d)
    unvisited = np.ones(K, dtype=bool)
    unvisited[start] = False
    tour = [start]
    for _ in range(K - 1):
        cur = tour[-1]
        dist = np.where(unvisited, d[cur], np.inf)
        tour.append(int(np.argmin(dist)))  # argmin takes the lowest id on ties
        unvisited[tour[-1]] = False
    return tour


def _two_opt(tour: list[int], d: np.ndarray, max_passes: int = 10) -> list[int]:
    """2-opt passes on the cyclic tour until no improvement or the pass cap."""
    tour = list(tour)
    K = len(tour)
    for _ in range(max_passes):
        improved = False
        for i in range(K - 1):
            a, b = tour[i], tour[i + 1]
            for j in range(i + 2, K):
                c, e = tour[j], tour[(j + 1) % K]
                if i == 0 and j == K - 1:
                    continue
                delta = (d[a, c] + d[b, e]) - (d[a, b] + d[c, e])
                if delta < -1e-12:
                    tour[i + 1:j + 1] = reversed(tour[i + 1:j + 1])
                    improved = True
                    b = tour[i + 1]
        if not improved:
            break
    return tour


def tour_length(tour: list[int], d: np.ndarray, cyclic: bool = True) -> float:
    total = sum(d[tour[i], tour[i + 1]] for i in range(len(tour) - 1))
    if cyclic:
        total += d[tour[-1], tour[0]]
    return float(total)


def assign_segments(segments: list[list[int]], agent_nodes,
                    dist_matrix: np.ndarray) -> list[list[int]]:
    """Permute segments so each agent patrols the one nearest its start node.

    Exhaustive over M! for small teams, greedy otherwise; ties resolve to
    the identity-most assignment (lower agent keeps the lower segment).
    """
    M = len(segments)
    cost = np.array([[dist_matrix[int(agent_nodes[m])][seg].min() for seg in segments]
                     for m in range(M)])
    if M <= 6:
        best, best_perm = np.inf, tuple(range(M))
        for perm in itertools.permutations(range(M)):
            c = sum(cost[m, perm[m]] for m in range(M))
            if c < best - 1e-12:
                best, best_perm = c, perm
        order = best_perm
    else:
        taken: set[int] = set()
        order = []
        for m in range(M):
            pick = min((cost[m, j], j) for j in range(M) if j not in taken)[1]
            order.append(pick)
            taken.add(pick)
    return [segments[j] for j in order]


def coverage_build_route(graph: WorldGraph, M: int) -> list[list[int]]:
    """Split one global tour into M contiguous, near-equal-length segments.

    The tour is nearest-neighbor from node 0 refined by 2-opt, measured in
    graph shortest-path distance. Cuts are placed greedily at the node
    boundary whose cumulative length is closest to an equal share; every
    node lands in exactly one segment.
    """
    d = graph.dist_matrix
    tour = _two_opt(_nearest_neighbor_tour(d), d)
    K = len(tour)
    if M == 1:
        return [tour]
    if M >= K:
        return [[tour[m % K]] for m in range(M)]

    leg = np.array([d[tour[i], tour[i + 1]] for i in range(K - 1)])
    segments = []
    start = 0
    remaining = float(leg.sum())
    for seg_idx in range(M - 1):
        seg_target = remaining / (M - seg_idx)
        cum = 0.0
        cut = start + 1  # at least one node per segment
        max_cut = K - (M - seg_idx - 1)  # leave one node per remaining segment
        best_gap = abs(cum - seg_target)
        for i in range(start, max_cut - 1):
            cum += leg[i]
            gap = abs(cum - seg_target)
            if gap <= best_gap:
                best_gap = gap
                cut = i + 2
            else:
                break
        cut = min(cut, max_cut)
        segments.append(tour[start:cut])
        remaining -= float(leg[start:cut - 1].sum()) + (leg[cut - 1] if cut < K else 0.0)
        start = cut
    segments.append(tour[start:])
    return segments


class CoverageState:
    """Per-agent cursor over its route segment (wraps when exhausted).

    The cursor starts at the segment node closest to the agent's spawn so
    the patrol begins without a long commute.
    """

    def __init__(self, segments: list[list[int]], agent_nodes=None,
                 dist_matrix: np.ndarray | None = None):
        self.segments = segments
        self.cursor = [0] * len(segments)
        if agent_nodes is not None and dist_matrix is not None:
            for m, seg in enumerate(segments):
                d = dist_matrix[int(agent_nodes[m])][seg]
                self.cursor[m] = int(np.argmin(d))
        self.visited: list[set[int]] = [set() for _ in segments]

    def current_target(self, m: int, at_node: int) -> int:
        seg = self.segments[m]
        # mark and skip anything already reached this lap
        for _ in range(len(seg) + 1):
            tgt = seg[self.cursor[m]]
            if at_node == tgt:
                self.visited[m].add(tgt)
            if tgt in self.visited[m]:
                self.cursor[m] = (self.cursor[m] + 1) % len(seg)
                if self.cursor[m] == 0:
                    self.visited[m].clear()
            else:
                return tgt
        return seg[self.cursor[m]]


def coverage_step(sim: Simulation, state: CoverageState) -> list[int]:
    """Advance each agent one hop along the shortest path toward its route node."""
    actions = []
    for m, v in enumerate(sim.agent_nodes):
        v = int(v)
        tgt = state.current_target(m, v)
        hop = next_hop(sim.graph, v, tgt)
        if hop == v:  # already on target; head for the next one
            nbrs = sim.graph.adjacency[v]
            hop = min(nbrs, key=lambda u: (sim.graph.edge_length(v, u), u))
        actions.append(int(hop))
    return actions


# -- auction -------------------------------------------------------------------


def estimate_target_nodes(sim: Simulation) -> np.ndarray:
    """Per-target argmax of the posterior mean over nodes (ties: lower id)."""
    return np.argmax(sim.node_means, axis=1)


def auction_assign(bids: np.ndarray) -> dict[int, int]:
    """Best-bid-first matching: agent -> target, at most one target per agent.

    Targets go up for auction in descending order of their best available
    bid; the highest bidder wins (ties: lower agent id, then lower target id).
    """
    M, N = bids.shape
    free_agents = set(range(M))
    free_targets = set(range(N))
    assignment: dict[int, int] = {}
    while free_agents and free_targets:
        best = None
        for j in sorted(free_targets):
            m_best, b_best = None, -np.inf
            for m in sorted(free_agents):
                if bids[m, j] > b_best:
                    m_best, b_best = m, bids[m, j]
            if best is None or b_best > best[0]:
                best = (b_best, j, m_best)
        _, j, m = best
        assignment[m] = j
        free_agents.remove(m)
        free_targets.remove(j)
    return assignment


def auction_step(sim: Simulation) -> list[int]:
    """Greedy best-bid-first assignment of agents to estimated target locations.

    bid(m, j) = posterior std of target j at its estimated node, discounted by
    graph distance. Targets with no positive detection evidence have no usable
    location estimate and sit out the auction (a flat belief would send every
    agent to the same argmax node). Winners move one hop toward their target's
    node; agents left without a target climb their local uncertainty field
    independently (no coordination, unlike greedy_step's claim discount).
    """
    s = sim.cfg.sim
    p_hat = estimate_target_nodes(sim)
    sigma = np.sqrt(sim.node_vars[np.arange(s.N), p_hat])
    d = sim.graph.dist_matrix
    bids = np.empty((s.M, s.N))
    for m, v in enumerate(sim.agent_nodes):
        bids[m] = sigma / (1.0 + d[int(v), p_hat])
    pool = [j for j in range(s.N) if sim.node_means[j, p_hat[j]] > 1e-6]

    assignment = {m: pool[j] for m, j in auction_assign(bids[:, pool]).items()}
    scores = sim.node_vars.sum(axis=0)
    actions = [0] * s.M
    for m in range(s.M):
        v = int(sim.agent_nodes[m])
        nbrs = sim.graph.adjacency[v]
        if m in assignment:
            tgt = int(p_hat[assignment[m]])
            hop = next_hop(sim.graph, v, tgt)
            if hop == v:  # standing on the estimate: stay close
                hop = min(nbrs, key=lambda u: (sim.graph.edge_length(v, u), u))
            actions[m] = int(hop)
        else:
            actions[m] = int(max(nbrs, key=lambda u: (scores[u], -u)))
    return actions


# -- greedy uncertainty ---------------------------------------------------------


def greedy_step(sim: Simulation) -> list[int]:
    """Each agent takes the neighbor with the highest summed posterior variance.

    Agents decide sequentially by id; nodes already claimed this step count
    at half their variance so the team spreads out.
    """
    scores = sim.node_vars.sum(axis=0)
    claimed: set[int] = set()
    actions = []
    for v in sim.agent_nodes:
        nbrs = sim.graph.adjacency[int(v)]
        best = max(nbrs, key=lambda u: (scores[u] * (0.5 if u in claimed else 1.0), -u))
        actions.append(int(best))
        claimed.add(int(best))
    return actions


# -- uniform planner interface ---------------------------------------------------


class Planner:
    name = "base"

    def reset(self, sim: Simulation) -> None:
        pass

    def step(self, sim: Simulation) -> list[int]:
        raise NotImplementedError


class RandomPlanner(Planner):
    name = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def step(self, sim):
        return random_step(sim, self.rng)


class CoveragePlanner(Planner):
    name = "coverage"

    def __init__(self):
        self.state = None

    def reset(self, sim):
        segments = assign_segments(coverage_build_route(sim.graph, sim.cfg.sim.M),
                                   sim.agent_nodes, sim.graph.dist_matrix)
        self.state = CoverageState(segments, sim.agent_nodes, sim.graph.dist_matrix)

    def step(self, sim):
        if self.state is None:
            self.reset(sim)
        return coverage_step(sim, self.state)


class AuctionPlanner(Planner):
    name = "auction"

    def step(self, sim):
        return auction_step(sim)


class GreedyPlanner(Planner):
    name = "greedy"

    def step(self, sim):
        return greedy_step(sim)


class PolicyPlanner(Planner):
    """Runs the attention policy; greedy argmax by default, sampling if given an rng."""

    name = "compass"

    def __init__(self, net, rng: np.random.Generator | None = None):
        self.net = net
        self.rng = rng

    def step(self, sim):
        logits, _ = self.net.act(sim.policy_obs())
        actions = []
        for m, row in enumerate(logits):
            nbrs = sim.graph.adjacency[int(sim.agent_nodes[m])]
            if self.rng is None:
                idx = int(np.argmax(row[:len(nbrs)]))
            else:
                probs = np.exp(row[:len(nbrs)])
                probs = probs / probs.sum()
                idx = int(self.rng.choice(len(nbrs), p=probs))
            actions.append(int(nbrs[idx]))
        return actions


def make_planner(name: str, rng: np.random.Generator, net=None,
                 sample: bool = False) -> Planner:
    if name == "random":
        return RandomPlanner(rng)
    if name == "coverage":
        return CoveragePlanner()
    if name == "auction":
        return AuctionPlanner()
    if name == "greedy":
        return GreedyPlanner()
    if name == "compass":
        if net is None:
            raise InvalidInputError("compass planner needs a policy network")
        return PolicyPlanner(net, rng=rng if sample else None)
    raise InvalidInputError(f"unknown planner: {name!r}")
