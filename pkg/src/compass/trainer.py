"""PPO with GAE over parallel rollout environments.

Rollouts of fixed length run in every environment each iteration; the
shared team reward is recorded for every agent and all transitions feed
joint minibatch updates of the shared network. Learning rate decays by
0.96 every 64 iterations from 1e-4.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from compass.config import Config
from compass.policy_net import PolicyNetwork, collate_obs
from compass.reward import total_reward
from compass.simulator import Simulation


def lr_at(iteration: int, lr0: float = 1e-4, decay: float = 0.96,
          every: int = 64) -> float:
    """Stepwise exponential decay: lr0 * decay^floor(iteration / every)."""
    return lr0 * decay ** (iteration // every)


def clipped_objective(ratios: torch.Tensor, advantages: torch.Tensor,
                      eps: float) -> torch.Tensor:
    """Per-transition min(r * A, clip(r, 1-eps, 1+eps) * A)."""
    return torch.minimum(ratios * advantages,
                         torch.clamp(ratios, 1.0 - eps, 1.0 + eps) * advantages)


def ppo_loss(logp_new: torch.Tensor, logp_old: torch.Tensor,
             advantages: torch.Tensor, values: torch.Tensor,
             returns: torch.Tensor, entropy: torch.Tensor,
             clip_eps: float, value_coef: float,
             entropy_coef: float) -> tuple[torch.Tensor, dict]:
    """Clipped-surrogate policy loss plus value MSE and entropy bonus.

    Advantages must already be normalized by the caller. Raises on
    non-finite importance ratios, naming the first offending transition.
    """
    ratios = torch.exp(logp_new - logp_old)
    if not torch.isfinite(ratios).all():
        bad = torch.nonzero(~torch.isfinite(ratios))[0].tolist()
        raise FloatingPointError(f"non-finite importance ratio at transition {bad}")
    surrogate = clipped_objective(ratios, advantages, clip_eps)
    policy_loss = -surrogate.mean()
    value_loss = ((values - returns) ** 2).mean()
    entropy_mean = entropy.mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy_mean
    stats = {
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy_mean.detach()),
        "clip_frac": float((torch.abs(ratios - 1.0) > clip_eps).float().mean()),
    }
    return loss, stats


def compute_gae(rewards: np.ndarray, values: np.ndarray, bootstrap: np.ndarray,
                dones: np.ndarray, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over (env, step, agent) arrays.

    rewards: (E, T); values: (E, T, M); bootstrap: (E, M) value after the last
    step; dones: (E, T). Returns (advantages, returns), both (E, T, M).
    """
    E, T, M = values.shape
    adv = np.zeros((E, T, M))
    next_adv = np.zeros((E, M))
    next_value = bootstrap
    for t in range(T - 1, -1, -1):
        not_done = 1.0 - dones[:, t, None]
        delta = rewards[:, t, None] + gamma * next_value * not_done - values[:, t]
        adv[:, t] = delta + gamma * lam * not_done * next_adv
        next_adv = adv[:, t]
        next_value = values[:, t]
    return adv, adv + values


@dataclass
class RolloutBuffer:
    """One iteration of experience: N_env * T * M transitions."""

    obs: list            # flat list of obs dicts, index e * T + t
    act_idx: np.ndarray  # (E, T, M) index into each agent's neighbor list
    logp_old: np.ndarray  # (E, T, M)
    values: np.ndarray   # (E, T, M)
    rewards: np.ndarray  # (E, T) shared team reward
    dones: np.ndarray    # (E, T)
    bootstrap: np.ndarray  # (E, M)
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def _compact_obs(obs: dict) -> dict:
    out = dict(obs)
    out["features"] = obs["features"].astype(np.float32)
    out["dist"] = obs["dist"].astype(np.float32)
    out["lap_pe"] = obs["lap_pe"].astype(np.float32)
    return out


def collect_rollouts(envs: list[Simulation], net: PolicyNetwork,
                     rng: np.random.Generator, k_start: int,
                     cfg: Config) -> RolloutBuffer:
    """Roll every environment forward T steps, sampling from the actor."""
    p = cfg.ppo
    E, T, M = len(envs), p.rollout_T, cfg.sim.M
    need_adj = net.variant == "no_spatial"
    obs_now = [_compact_obs(env.policy_obs()) for env in envs]
    obs_store: list[dict] = []
    act_idx = np.zeros((E, T, M), dtype=np.int64)
    logp_old = np.zeros((E, T, M))
    values = np.zeros((E, T, M))
    rewards = np.zeros((E, T))
    dones = np.zeros((E, T))

    for t in range(T):
        batch = collate_obs(obs_now, dtype=net.dtype, need_adjacency=need_adj)
        with torch.no_grad():
            logp, vals = net.forward(batch)
        logp = logp.cpu().numpy()
        values[:, t] = vals.cpu().numpy()
        # parallel environments are replicas of one system and share its
        # decision-step clock; the curriculum advances with that clock
        k_global = k_start + t
        for e, env in enumerate(envs):
            actions = []
            for m in range(M):
                nbrs = obs_now[e]["neighbors"][m]
                probs = np.exp(logp[e, m, :len(nbrs)])
                probs /= probs.sum()
                idx = int(rng.choice(len(nbrs), p=probs))
                act_idx[e, t, m] = idx
                logp_old[e, t, m] = logp[e, m, idx]
                actions.append(int(nbrs[idx]))
            obs_store.append(obs_now[e])
            res = env.advance(actions)
            rewards[e, t] = total_reward(k_global, res.ig, res.cp, res.pp)
            if res.done:
                dones[e, t] = 1.0
                env.reset()
            obs_now[e] = _compact_obs(env.policy_obs())

    batch = collate_obs(obs_now, dtype=net.dtype, need_adjacency=need_adj)
    with torch.no_grad():
        _, boot = net.forward(batch)

    # obs_store was appended t-major; reorder to env-major (e * T + t)
    reordered = [obs_store[t * E + e] for e in range(E) for t in range(T)]
    return RolloutBuffer(obs=reordered, act_idx=act_idx, logp_old=logp_old,
                         values=values, rewards=rewards, dones=dones,
                         bootstrap=boot.cpu().numpy())


def update(net: PolicyNetwork, optimizer: torch.optim.Optimizer,
           buffer: RolloutBuffer, cfg: Config, iteration: int,
           rng: np.random.Generator) -> dict:
    """One PPO update: normalize advantages, run epochs of minibatch steps.

    A NaN gradient aborts the whole iteration and restores the parameters
    and optimizer state captured at entry.
    """
    p = cfg.ppo
    E, T, M = buffer.shape
    need_adj = net.variant == "no_spatial"
    lr = lr_at(iteration, p.lr0, p.lr_decay, p.lr_decay_every)
    for group in optimizer.param_groups:
        group["lr"] = lr

    adv = buffer.advantages
    std = adv.std()
    adv = (adv - adv.mean()) / max(std, 1e-8)

    param_snapshot = copy.deepcopy(net.state_dict())
    optim_snapshot = copy.deepcopy(optimizer.state_dict())

    n_steps = E * T
    mb_size = max(1, n_steps // p.n_minibatches)
    losses, kls, entropies = [], [], []
    aborted = False
    for _ in range(p.epochs):
        perm = rng.permutation(n_steps)
        for start in range(0, n_steps, mb_size):
            sel = perm[start:start + mb_size]
            if len(sel) == 0:
                continue
            batch = collate_obs([buffer.obs[i] for i in sel], dtype=net.dtype,
                                need_adjacency=need_adj)
            logp_all, vals = net.forward(batch)
            e_idx, t_idx = sel // T, sel % T
            a_idx = torch.as_tensor(buffer.act_idx[e_idx, t_idx])
            logp_new = torch.gather(logp_all, 2, a_idx[..., None])[..., 0]
            # zero the -inf logs of padded neighbors before multiplying, or the
            # product's backward pass turns 0 * -inf into NaN gradients
            safe_logp = logp_all.masked_fill(~batch["nbr_mask"], 0.0)
            entropy = -(torch.exp(logp_all) * safe_logp).sum(-1)
            logp_old = torch.as_tensor(buffer.logp_old[e_idx, t_idx], dtype=net.dtype)
            adv_mb = torch.as_tensor(adv[e_idx, t_idx], dtype=net.dtype)
            ret_mb = torch.as_tensor(buffer.returns[e_idx, t_idx], dtype=net.dtype)
            loss, _ = ppo_loss(logp_new, logp_old, adv_mb, vals, ret_mb, entropy,
                               p.clip_eps, p.value_coef, p.entropy_coef)
            optimizer.zero_grad()
            loss.backward()
            grads_finite = all(param.grad is None or torch.isfinite(param.grad).all()
                               for param in net.parameters())
            if not grads_finite:
                net.load_state_dict(param_snapshot)
                optimizer.load_state_dict(optim_snapshot)
                aborted = True
                break
            torch.nn.utils.clip_grad_norm_(net.parameters(), p.max_grad_norm)
            optimizer.step()
            losses.append(float(loss.detach()))
            kls.append(float((logp_old - logp_new.detach()).mean()))
            entropies.append(float(entropy.detach().mean()))
        if aborted:
            break
    return {
        "loss": float(np.mean(losses)) if losses else float("nan"),
        "kl": float(np.mean(kls)) if kls else float("nan"),
        "entropy": float(np.mean(entropies)) if entropies else float("nan"),
        "lr": lr,
        "aborted": aborted,
    }


def train(cfg: Config, out_dir: str, master_seed: int | None = None,
          iterations: int | None = None, verbose: bool = False,
          header_lines: list[str] | None = None) -> tuple[PolicyNetwork, list[dict]]:
    """Full training run; writes train_log.csv and checkpoints under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.sim.seed if master_seed is None else master_seed
    n_iters = iterations if iterations is not None else cfg.n_iterations()
    p = cfg.ppo

    net = PolicyNetwork(cfg, dtype=torch.float32, init_seed=seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=p.lr0,
                                 betas=(0.9, 0.999), eps=1e-8)
    envs = [Simulation(cfg, master_seed=seed, env_index=e, mode="train",
                       record=False) for e in range(p.n_env)]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1_000_003)))

    log_rows: list[dict] = []
    log_path = os.path.join(out_dir, "train_log.csv")
    with open(log_path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "env_steps", "mean_reward", "loss",
                         "entropy", "kl", "lr"])
        env_steps = 0
        for it in range(n_iters):
            buffer = collect_rollouts(envs, net, rng, it * p.rollout_T, cfg)
            env_steps += p.n_env * p.rollout_T
            buffer.advantages, buffer.returns = compute_gae(
                buffer.rewards, buffer.values, buffer.bootstrap, buffer.dones,
                p.gamma, p.lam)
            stats = update(net, optimizer, buffer, cfg, it, rng)
            row = {
                "iteration": it,
                "env_steps": env_steps,
                "mean_reward": float(buffer.rewards.sum(axis=1).mean()),
                "loss": stats["loss"],
                "entropy": stats["entropy"],
                "kl": stats["kl"],
                "lr": stats["lr"],
            }
            log_rows.append(row)
            writer.writerow([row["iteration"], row["env_steps"],
                             repr(row["mean_reward"]), repr(row["loss"]),
                             repr(row["entropy"]), repr(row["kl"]), repr(row["lr"])])
            fh.flush()
            if verbose:
                print(f"iter {it:4d} reward {row['mean_reward']:.4f} "
                      f"loss {row['loss']:.4f} entropy {row['entropy']:.4f}"
                      + (" [aborted]" if stats["aborted"] else ""))
            if (it + 1) % p.checkpoint_every == 0:
                net.save_checkpoint(os.path.join(out_dir, f"checkpoint_{it + 1:05d}.ckpt"))
    net.save_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"))
    return net, log_rows
