"""Episode dynamics: target motion, agent moves, sensing, feature histories.

Targets drift continuously in the unit square via noisy waypoint pursuit;
agents hop along graph edges, one edge per decision step. Every step each
agent records one binary detection per target at its current node, beliefs
are refreshed, and per-node feature rows are appended to a ring buffer
consumed by planners and the policy network.

Per-environment RNG streams derive from (master_seed, env_index, episode),
so a full episode replays bit-exactly from its seed and action log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from compass import reward as rw
from compass.config import Config
from compass.errors import ContractViolation, InvalidInputError
from compass.gp_belief import KernelParams, Observation, TargetBelief, export_belief_csv
from compass.world_graph import WorldGraph, build_knn_graph, sample_nodes


@dataclass(frozen=True)
class SenseRecord:
    """One agent-target detection attempt, tied to the observing agent's node."""

    agent: int
    target_id: int
    node: int
    t: int
    y: float


@dataclass
class StepResult:
    step: int
    observations: list
    ig: float
    cp: float
    pp: float
    done: bool


class Simulation:
    """Single-environment episode state. Not thread-safe; one writer only."""

    def __init__(self, cfg: Config, master_seed: int | None = None,
                 env_index: int = 0, mode: str = "eval", record: bool = True):
        if mode not in ("eval", "train"):
            raise InvalidInputError(f"mode must be 'eval' or 'train', got {mode!r}")
        self.cfg = cfg
        self.master_seed = cfg.sim.seed if master_seed is None else master_seed
        self.env_index = env_index
        self.mode = mode
        self.record = record
        self.episode = -1
        self.reset()

    # -- episode lifecycle ------------------------------------------------

    def reset(self) -> None:
        cfg = self.cfg
        s = cfg.sim
        self.episode += 1
        ss = np.random.SeedSequence((self.master_seed, self.env_index, self.episode))
        self.rng = np.random.default_rng(ss)
        graph_seed = int(self.rng.integers(2**63))
        points = sample_nodes(s.K, graph_seed)
        self.graph: WorldGraph = build_knn_graph(points, s.k_nn, d_pe=cfg.net.d_pe,
                                                 seed=graph_seed)
        self.target_pos = self.rng.random((s.N, 2))
        self.waypoints = self.rng.random((s.N, 2))
        self.target_step_len = s.speed_factor * self.graph.mean_edge_length
        self.agent_nodes = np.sort(self.rng.choice(s.K, size=s.M, replace=False))
        self.trajectories = [[int(v)] for v in self.agent_nodes]
        self.dist_this_step = np.zeros(s.M)
        kp = KernelParams(cfg.kernel.sigma_f2, cfg.kernel.ell_s,
                          cfg.kernel.ell_t, cfg.kernel.sigma_n2)
        self.beliefs = [TargetBelief(j, kp, w_max=cfg.kernel.w_max,
                                     t_horizon=cfg.kernel.t_horizon)
                        for j in range(s.N)]
        self.step = 0
        self.actions_taken = 0
        self._raw_history = np.zeros((s.K, cfg.raw_history_len, cfg.feature_width))
        self._n_filled = 0
        self.node_means = np.zeros((s.N, s.K))
        self.node_vars = np.full((s.N, s.K), cfg.kernel.sigma_f2)
        self.node_means_future = np.zeros((s.N, s.K))
        self.node_vars_future = np.full((s.N, s.K), cfg.kernel.sigma_f2)
        self.mean_history: list[np.ndarray] = []
        self.var_history: list[np.ndarray] = []
        self.detect_history: list[np.ndarray] = []
        self.target_pos_history: list[np.ndarray] = []
        self.reward_terms: list[tuple[float, float, float]] = []
        self.trace: list[dict] = []
        self.update_node_history()

    def episode_done(self) -> bool:
        if self.mode == "eval":
            return self.actions_taken >= self.cfg.sim.B
        return self.step >= self.cfg.sim.train_horizon

    # -- dynamics ---------------------------------------------------------

    def step_targets(self) -> None:
        s = self.cfg.sim
        step_len = self.target_step_len
        for j in range(s.N):
            to_wp = self.waypoints[j] - self.target_pos[j]
            heading = np.arctan2(to_wp[1], to_wp[0])
            heading += self.rng.normal(0.0, s.heading_noise_std)
            redraw_u = self.rng.random()
            new_pos = self.target_pos[j] + step_len * np.array(
                [np.cos(heading), np.sin(heading)])
            clamped = np.clip(new_pos, 0.0, 1.0)
            hit_boundary = bool(np.any(clamped != new_pos))
            self.target_pos[j] = clamped
            arrived = np.linalg.norm(self.waypoints[j] - clamped) <= step_len
            if arrived or hit_boundary or redraw_u < s.waypoint_redraw_prob:
                self.waypoints[j] = self.rng.random(2)

    def apply_actions(self, actions) -> None:
        s = self.cfg.sim
        if len(actions) != s.M:
            raise InvalidInputError(f"need {s.M} actions, got {len(actions)}")
        for m, a in enumerate(actions):
            u = int(self.agent_nodes[m])
            a = int(a)
            if a not in self.graph.adjacency[u]:
                raise ContractViolation(
                    f"agent {m}: action {a} is not adjacent to node {u}")
        for m, a in enumerate(actions):
            u = int(self.agent_nodes[m])
            self.dist_this_step[m] = self.graph.edge_length(u, int(a))
            self.agent_nodes[m] = int(a)
            self.trajectories[m].append(int(a))
        self.step += 1
        self.actions_taken += 1

    def sense(self) -> list[SenseRecord]:
        """Record one binary detection per (agent, target) pair and feed the GPs."""
        s = self.cfg.sim
        records = []
        for m in range(s.M):
            node = int(self.agent_nodes[m])
            node_xy = self.graph.nodes[node]
            for j in range(s.N):
                hit = np.linalg.norm(self.target_pos[j] - node_xy) <= s.r_sense
                rec = SenseRecord(agent=m, target_id=j, node=node,
                                  t=self.step, y=1.0 if hit else 0.0)
                records.append(rec)
                self.beliefs[j].add_observation(
                    Observation(p=(float(node_xy[0]), float(node_xy[1])),
                                t=float(self.step), y=rec.y, target_id=j))
        for belief in self.beliefs:
            belief.prune_and_refresh(float(self.step))
        return records

    # -- features ---------------------------------------------------------

    def update_node_history(self) -> None:
        """Evaluate all beliefs at every node for t and t+delta; push a feature row."""
        cfg = self.cfg
        s = cfg.sim
        t = float(self.step)
        nodes = self.graph.nodes
        queries = np.vstack([
            np.column_stack([nodes, np.full(s.K, t)]),
            np.column_stack([nodes, np.full(s.K, t + s.delta)]),
        ])
        means_now = np.empty((s.N, s.K))
        vars_now = np.empty((s.N, s.K))
        means_fut = np.empty((s.N, s.K))
        vars_fut = np.empty((s.N, s.K))
        for j, belief in enumerate(self.beliefs):
            m, v = belief.posterior(queries)
            means_now[j], means_fut[j] = m[:s.K], m[s.K:]
            vars_now[j], vars_fut[j] = v[:s.K], v[s.K:]
        self.node_means, self.node_vars = means_now, vars_now
        self.node_means_future, self.node_vars_future = means_fut, vars_fut

        row = np.empty((s.K, cfg.feature_width))
        row[:, 0:2 * s.N:2] = means_now.T
        row[:, 1:2 * s.N:2] = vars_now.T
        row[:, 2 * s.N:4 * s.N:2] = means_fut.T
        row[:, 2 * s.N + 1:4 * s.N:2] = vars_fut.T
        row[:, 4 * s.N] = self.presence_flags()
        row[:, 4 * s.N + 1:] = nodes
        self._raw_history[:, :-1] = self._raw_history[:, 1:]
        self._raw_history[:, -1] = row
        self._n_filled = min(self._n_filled + 1, cfg.raw_history_len)

    def presence_flags(self) -> np.ndarray:
        flags = np.zeros(self.cfg.sim.K)
        flags[self.agent_nodes] = 1.0
        return flags

    def pooled_features(self) -> tuple[np.ndarray, np.ndarray]:
        """Average-pool the raw history with the configured stride.

        Returns (features (K, H, d_f), valid (H,)). Partially filled windows
        average only their populated rows; empty windows are zero and masked.
        """
        cfg = self.cfg
        H, stride = cfg.sim.H, cfg.sim.stride
        R = cfg.raw_history_len
        first_valid = R - self._n_filled
        pooled = np.zeros((cfg.sim.K, H, cfg.feature_width))
        valid = np.zeros(H, dtype=bool)
        for i in range(H):
            lo, hi = i * stride, min((i + 1) * stride, R)
            lo_valid = max(lo, first_valid)
            if lo_valid < hi:
                pooled[:, i] = self._raw_history[:, lo_valid:hi].mean(axis=1)
                valid[i] = True
        return pooled, valid

    def dist_to_nearest_agent(self) -> np.ndarray:
        return self.graph.dist_matrix[:, self.agent_nodes].min(axis=1)

    def policy_obs(self) -> dict:
        """Everything the policy network consumes for one decision."""
        features, valid = self.pooled_features()
        return {
            "features": features,
            "valid": valid,
            "presence": self.presence_flags().astype(np.int64),
            "dist": self.dist_to_nearest_agent(),
            "lap_pe": self.graph.lap_pe,
            "agent_nodes": self.agent_nodes.copy(),
            "neighbors": [self.graph.adjacency[int(v)] for v in self.agent_nodes],
            "adjacency": self.graph.adjacency,
        }

    # -- stepping ---------------------------------------------------------

    def advance(self, actions) -> StepResult:
        """One full decision cycle: move, drift, sense, refresh, score."""
        sigma_f2 = self.cfg.kernel.sigma_f2
        prev_vars = self.node_vars.copy()
        self.apply_actions(actions)
        self.step_targets()
        records = self.sense()
        self.update_node_history()
        ig = rw.information_gain(prev_vars, self.node_vars, sigma_f2)
        cp = rw.coverage_penalty(records, prev_vars, sigma_f2)
        pp = rw.path_penalty(self.dist_this_step)
        if self.record:
            self.mean_history.append(self.node_means.copy())
            self.var_history.append(self.node_vars.copy())
            det = np.zeros((self.cfg.sim.M, self.cfg.sim.N))
            for rec in records:
                det[rec.agent, rec.target_id] = rec.y
            self.detect_history.append(det)
            self.target_pos_history.append(self.target_pos.copy())
            self.reward_terms.append((ig, cp, pp))
            self.trace.append({
                "step": self.step,
                "agent_nodes": [int(v) for v in self.agent_nodes],
                "target_positions": [[float(x), float(y)] for x, y in self.target_pos],
                "observations": [[rec.agent, rec.target_id, rec.node, rec.y]
                                 for rec in records],
                "reward_terms": {"ig": ig, "cp": cp, "pp": pp},
            })
        return StepResult(step=self.step, observations=records,
                          ig=ig, cp=cp, pp=pp, done=self.episode_done())

    # -- export -----------------------------------------------------------

    def export_trace_jsonl(self, path: str) -> None:
        """One JSON record per completed step."""
        with open(path, "w") as fh:
            for entry in self.trace:
                fh.write(json.dumps(entry) + "\n")

    def export_belief_snapshot(self, path: str) -> None:
        export_belief_csv(path, self.node_means, self.node_vars)


def init_episode(cfg: Config, master_seed: int | None = None, env_index: int = 0,
                 mode: str = "eval", record: bool = True) -> Simulation:
    """Build a freshly seeded episode."""
    return Simulation(cfg, master_seed=master_seed, env_index=env_index,
                      mode=mode, record=record)


def replay_episode(cfg: Config, master_seed: int, env_index: int,
                   actions_log: list[list[int]], mode: str = "eval") -> Simulation:
    """Re-run an episode from its seed and action log."""
    sim = Simulation(cfg, master_seed=master_seed, env_index=env_index, mode=mode)
    for actions in actions_log:
        sim.advance(actions)
    return sim
