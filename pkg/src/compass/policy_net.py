"""Spatio-temporal attention policy with pointer action head and team critic.

Four blocks over per-node feature histories:

  target encoder   -- groupwise linear embedding of GP stats, presence, coords
  temporal decoder -- latest slot queries the pooled history (masked attention,
                      learnable timestep encodings, pre-norm residual + FFN)
  spatial encoder  -- multi-head self-attention across all nodes, with graph
                      Laplacian positional encodings, a presence embedding,
                      and distance-to-nearest-agent fused at the output
  heads            -- pointer attention over each agent's neighbors (actor)
                      and an MLP on concatenated agent features (critic)

All attention math is written out with explicit projections so tests can
check it against independent oracles. Gradients come from torch autograd.
Ablation switches: no_presence (presence feature and embedding removed),
no_spatial (attention stack replaced by neighbor mean pooling),
no_temporal (history attention replaced by uniform averaging).
"""

from __future__ import annotations

import json
import math

import numpy as np
import torch
from torch import nn

from compass.config import Config
from compass.errors import ContractViolation, InvalidInputError

CHECKPOINT_VERSION = 1
_NEG_INF = float("-inf")


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


class PolicyNetwork(nn.Module):
    """All parameters live in one flat, ordered dict; names are stable and
    define the checkpoint manifest order."""

    def __init__(self, cfg: Config, dtype: torch.dtype = torch.float32,
                 init_seed: int = 0):
        super().__init__()
        net = cfg.net
        self.cfg = cfg
        self.dtype = dtype
        self.d_e = net.d_e
        self.n_heads = net.n_heads
        self.d_head = net.d_e // net.n_heads
        self.n_targets = cfg.sim.N
        self.n_agents = cfg.sim.M
        self.n_slots = cfg.sim.H
        self.d_pe = net.d_pe
        self.variant = net.variant
        self.critic_mode = net.critic
        self.ffn = net.ffn_mult * net.d_e

        rng = np.random.default_rng(init_seed)
        spec: list[tuple[str, object]] = []
        d_e, d_f = net.d_e, cfg.feature_width

        def lin(name, fin, fout):
            w, b = _linear_init(rng, fin, fout)
            spec.append((f"{name}_w", w))
            spec.append((f"{name}_b", b))

        def ln(name):
            spec.append((f"{name}_g", np.ones(d_e)))
            spec.append((f"{name}_b", np.zeros(d_e)))

        lin("enc_gp", 4 * self.n_targets, d_e)
        if self.variant != "no_presence":
            lin("enc_presence", 1, d_e)
        lin("enc_coord", 2, d_e)
        groups = 2 if self.variant == "no_presence" else 3
        lin("enc_out", groups * d_e, d_e)

        if self.variant != "no_temporal":
            spec.append(("time_enc", rng.uniform(-0.1, 0.1, size=(self.n_slots, d_e))))
            ln("tdec_ln1")
            for p in ("q", "k", "v", "o"):
                lin(f"tdec_{p}", d_e, d_e)
            ln("tdec_ln2")
            lin("tdec_ff1", d_e, self.ffn)
            lin("tdec_ff2", self.ffn, d_e)

        lin("pe", net.d_pe, d_e)
        if self.variant != "no_presence":
            spec.append(("presence_emb", rng.uniform(-0.1, 0.1, size=(2, d_e))))
        if self.variant != "no_spatial":
            for layer in range(net.n_spatial_layers):
                ln(f"senc{layer}_ln1")
                for p in ("q", "k", "v", "o"):
                    lin(f"senc{layer}_{p}", d_e, d_e)
                ln(f"senc{layer}_ln2")
                lin(f"senc{layer}_ff1", d_e, self.ffn)
                lin(f"senc{layer}_ff2", self.ffn, d_e)
        lin("fusion", d_e + 1, d_e)

        wq, _ = _linear_init(rng, d_e, d_e)
        wk, _ = _linear_init(rng, d_e, d_e)
        spec.append(("actor_q_w", wq))
        spec.append(("actor_k_w", wk))

        critic_in = self.n_agents * d_e if self.critic_mode == "central" else d_e
        lin("critic_l1", critic_in, 128)
        lin("critic_l2", 128, 1)

        self.params = nn.ParameterDict(
            {name: nn.Parameter(torch.as_tensor(arr, dtype=dtype)) for name, arr in spec}
        )

    # -- small building blocks --------------------------------------------

    def _p(self, name: str) -> torch.Tensor:
        return self.params[name]

    def _linear(self, x: torch.Tensor, name: str) -> torch.Tensor:
        return x @ self._p(f"{name}_w") + self._p(f"{name}_b")

    def _layer_norm(self, x: torch.Tensor, name: str) -> torch.Tensor:
        mean = x.mean(-1, keepdim=True)
        var = x.var(-1, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + 1e-5) * self._p(f"{name}_g") + self._p(f"{name}_b")

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        # (..., T, d_e) -> (..., h, T, d_head)
        shape = x.shape[:-2] + (x.shape[-2], self.n_heads, self.d_head)
        return x.reshape(shape).transpose(-3, -2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-3, -2)
        return x.reshape(x.shape[:-2] + (self.d_e,))

    def _attention(self, q, k, v, mask=None):
        """Multi-head scaled dot-product attention.

        q: (..., Tq, d_e), k/v: (..., Tk, d_e), mask: (..., Tk) bool, True = keep.
        Masked positions get attention weight exactly 0.
        """
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask[..., None, None, :], _NEG_INF)
        attn = torch.softmax(scores, dim=-1)
        return self._merge(attn @ vh), attn

    # -- blocks -------------------------------------------------------------

    def target_encoder(self, features: torch.Tensor) -> torch.Tensor:
        """Embed raw feature rows (..., d_f) into (..., d_e)."""
        features = torch.as_tensor(features, dtype=self.dtype)
        if torch.isnan(features).any():
            where = torch.nonzero(torch.isnan(features))[0].tolist()
            raise InvalidInputError(f"NaN in node features at index {where}")
        n4 = 4 * self.n_targets
        gp = self._linear(features[..., :n4], "enc_gp")
        coord = self._linear(features[..., n4 + 1:n4 + 3], "enc_coord")
        if self.variant == "no_presence":
            cat = torch.cat([gp, coord], dim=-1)
        else:
            pres = self._linear(features[..., n4:n4 + 1], "enc_presence")
            cat = torch.cat([gp, pres, coord], dim=-1)
        return self._linear(cat, "enc_out")

    def temporal_decoder(self, emb: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Contextualize each node's history into one vector.

        emb: (B, K, H, d_e) or (K, H, d_e); valid: (B, H) or (H,) marking
        populated slots. The newest slot (last index) must be valid.
        """
        emb = torch.as_tensor(emb, dtype=self.dtype)
        squeeze = emb.dim() == 3
        if squeeze:
            emb = emb[None]
        valid = torch.as_tensor(valid, dtype=torch.bool).reshape(emb.shape[0], emb.shape[2])
        if not valid.any(dim=1).all():
            raise InvalidInputError("temporal decoder: no valid history slot")

        if self.variant == "no_temporal":
            w = valid[:, None, :, None].to(emb.dtype)
            out = (emb * w).sum(2) / w.sum(2)
            return out[0] if squeeze else out

        mem = emb + self._p("time_enc")
        q = mem[..., -1, :]                       # (B, K, d_e), newest slot
        qn = self._layer_norm(q, "tdec_ln1")
        mn = self._layer_norm(mem, "tdec_ln1")
        B, K, H, d_e = mem.shape
        att, _ = self._attention(
            self._linear(qn, "tdec_q").reshape(B * K, 1, d_e),
            self._linear(mn, "tdec_k").reshape(B * K, H, d_e),
            self._linear(mn, "tdec_v").reshape(B * K, H, d_e),
            mask=valid.repeat_interleave(K, dim=0),
        )
        h = q + self._linear(att.reshape(B, K, d_e), "tdec_o")
        hn = self._layer_norm(h, "tdec_ln2")
        h = h + self._linear(torch.relu(self._linear(hn, "tdec_ff1")), "tdec_ff2")
        return h[0] if squeeze else h

    def spatial_encoder(self, e_temp, lap_pe, presence, dist, adjacency=None):
        """Mix information across nodes; fuse per-node distance to nearest agent.

        e_temp: (B, K, d_e) or (K, d_e); lap_pe: (.., K, d_pe); presence: (.., K)
        in {0,1}; dist: (.., K). ``adjacency`` (dense (.., K, K)) is only
        consulted by the no_spatial variant's neighbor pooling.
        """
        e_temp = torch.as_tensor(e_temp, dtype=self.dtype)
        squeeze = e_temp.dim() == 2
        if squeeze:
            e_temp = e_temp[None]
        B, K, _ = e_temp.shape
        lap_pe = torch.as_tensor(lap_pe, dtype=self.dtype).reshape(B, K, -1)
        if lap_pe.shape[-1] != self.d_pe:
            raise InvalidInputError(
                f"lap_pe width {lap_pe.shape[-1]} != configured d_pe {self.d_pe}")
        presence = torch.as_tensor(presence).reshape(B, K).long()
        dist = torch.as_tensor(dist, dtype=self.dtype).reshape(B, K)

        x = e_temp + self._linear(lap_pe, "pe")
        if self.variant != "no_presence":
            x = x + self._p("presence_emb")[presence]

        if self.variant == "no_spatial":
            if adjacency is None:
                raise InvalidInputError("no_spatial variant needs the adjacency matrix")
            adj = torch.as_tensor(adjacency, dtype=self.dtype).reshape(B, K, K)
            x = adj @ x / adj.sum(-1, keepdim=True)
        else:
            for layer in range(self.cfg.net.n_spatial_layers):
                tag = f"senc{layer}"
                xn = self._layer_norm(x, f"{tag}_ln1")
                att, _ = self._attention(
                    self._linear(xn, f"{tag}_q"),
                    self._linear(xn, f"{tag}_k"),
                    self._linear(xn, f"{tag}_v"),
                )
                x = x + self._linear(att, f"{tag}_o")
                xn = self._layer_norm(x, f"{tag}_ln2")
                x = x + self._linear(torch.relu(self._linear(xn, f"{tag}_ff1")), f"{tag}_ff2")

        fused = self._linear(torch.cat([x, dist[..., None]], dim=-1), "fusion")
        return fused[0] if squeeze else fused

    # -- heads ----------------------------------------------------------------

    def actor_logits(self, e_final: torch.Tensor, agent_node: int,
                     neighbor_ids) -> torch.Tensor:
        """Log-probabilities over one agent's neighbor set ((K, d_e) input)."""
        if len(neighbor_ids) == 0:
            raise ContractViolation("agent has no neighbors; graph invariant broken")
        e_final = torch.as_tensor(e_final, dtype=self.dtype)
        q = e_final[agent_node] @ self._p("actor_q_w")
        k = e_final[list(neighbor_ids)] @ self._p("actor_k_w")
        scores = k @ q / math.sqrt(self.d_e)
        return torch.log_softmax(scores, dim=-1)

    def actor_logits_batch(self, e_final, agent_nodes, neighbors, nbr_mask):
        """Batched pointer head.

        e_final: (B, K, d_e); agent_nodes: (B, M); neighbors: (B, M, L) padded
        ids; nbr_mask: (B, M, L) with True on real neighbors.
        """
        B, K, d_e = e_final.shape
        bidx = torch.arange(B)[:, None]
        q = e_final[bidx, agent_nodes] @ self._p("actor_q_w")          # (B, M, d_e)
        keys = e_final @ self._p("actor_k_w")                          # (B, K, d_e)
        nbr_keys = keys[bidx[:, :, None], neighbors]                   # (B, M, L, d_e)
        scores = (nbr_keys * q[:, :, None, :]).sum(-1) / math.sqrt(self.d_e)
        scores = scores.masked_fill(~nbr_mask, _NEG_INF)
        return torch.log_softmax(scores, dim=-1)

    def critic_value(self, e_final: torch.Tensor, agent_nodes) -> torch.Tensor:
        """Shared state value from agent features ((B, M) values; central mode
        broadcasts one value per environment)."""
        e_final = torch.as_tensor(e_final, dtype=self.dtype)
        squeeze = e_final.dim() == 2
        if squeeze:
            e_final = e_final[None]
        agent_nodes = torch.as_tensor(agent_nodes).reshape(e_final.shape[0], -1).long()
        if agent_nodes.shape[1] != self.n_agents:
            raise InvalidInputError(
                f"critic expects {self.n_agents} agent nodes, got {agent_nodes.shape[1]}")
        B = e_final.shape[0]
        feats = e_final[torch.arange(B)[:, None], agent_nodes]         # (B, M, d_e)
        if self.critic_mode == "central":
            flat = feats.reshape(B, -1)
            v = self._linear(torch.tanh(self._linear(flat, "critic_l1")), "critic_l2")
            out = v.expand(B, self.n_agents)
        else:
            v = self._linear(torch.tanh(self._linear(feats, "critic_l1")), "critic_l2")
            out = v[..., 0]
        return out[0] if squeeze else out

    # -- full passes ---------------------------------------------------------

    def forward(self, batch: dict) -> tuple[torch.Tensor, torch.Tensor]:
        """batch -> (log-probs (B, M, L), values (B, M)).

        Expected keys: features (B,K,H,d_f), valid (B,H), lap_pe (B,K,d_pe),
        presence (B,K), dist (B,K), agent_nodes (B,M), neighbors (B,M,L),
        nbr_mask (B,M,L), and adjacency (B,K,K) for the no_spatial variant.
        """
        emb = self.target_encoder(batch["features"])
        e_temp = self.temporal_decoder(emb, batch["valid"])
        e_final = self.spatial_encoder(e_temp, batch["lap_pe"], batch["presence"],
                                       batch["dist"], adjacency=batch.get("adjacency"))
        logp = self.actor_logits_batch(e_final, batch["agent_nodes"],
                                       batch["neighbors"], batch["nbr_mask"])
        values = self.critic_value(e_final, batch["agent_nodes"])
        return logp, values

    @torch.no_grad()
    def act(self, obs: dict) -> tuple[np.ndarray, np.ndarray]:
        """Single-environment inference: (log-probs (M, L), values (M,))."""
        batch = collate_obs([obs], dtype=self.dtype,
                            need_adjacency=self.variant == "no_spatial")
        logp, values = self.forward(batch)
        return logp[0].cpu().numpy(), values[0].cpu().numpy()

    # -- gradients -------------------------------------------------------------

    def gradients(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        """Reverse-mode gradients of a scalar loss for every parameter array.

        Parameters not touched by the loss get exact zeros.
        """
        if loss.grad_fn is None:
            raise ContractViolation("backward requested before a differentiable forward")
        names = list(self.params.keys())
        tensors = [self.params[n] for n in names]
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        return {n: (g if g is not None else torch.zeros_like(p))
                for n, p, g in zip(names, tensors, grads)}

    # -- checkpoints -------------------------------------------------------------

    def save_checkpoint(self, path: str) -> None:
        """Manifest line (JSON) followed by one little-endian float32 blob."""
        arrays = []
        blob = bytearray()
        for name, p in self.params.items():
            data = p.detach().cpu().numpy().astype("<f4")
            arrays.append({"name": name, "shape": list(data.shape),
                           "dtype": "float32", "byte_offset": len(blob)})
            blob.extend(data.tobytes())
        manifest = {"format_version": CHECKPOINT_VERSION, "arrays": arrays}
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest).encode() + b"\n")
            fh.write(bytes(blob))

    def load_checkpoint(self, path: str) -> None:
        with open(path, "rb") as fh:
            header = fh.readline()
            blob = fh.read()
        manifest = json.loads(header)
        version = manifest.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint format version: {version}")
        entries = {a["name"]: a for a in manifest["arrays"]}
        if set(entries) != set(self.params.keys()):
            missing = set(self.params.keys()) ^ set(entries)
            raise InvalidInputError(f"checkpoint/network parameter mismatch: {sorted(missing)}")
        with torch.no_grad():
            for name, p in self.params.items():
                a = entries[name]
                if list(p.shape) != a["shape"]:
                    raise InvalidInputError(
                        f"shape mismatch for {name}: {a['shape']} vs {list(p.shape)}")
                count = int(np.prod(a["shape"])) if a["shape"] else 1
                arr = np.frombuffer(blob, dtype="<f4", count=count,
                                    offset=a["byte_offset"]).reshape(a["shape"])
                p.copy_(torch.as_tensor(arr.copy(), dtype=self.dtype))


def collate_obs(obs_list: list[dict], dtype: torch.dtype = torch.float32,
                need_adjacency: bool = False) -> dict:
    """Stack per-environment observation dicts into padded torch batches."""
    B = len(obs_list)
    K = obs_list[0]["features"].shape[0]
    max_deg = max(len(nbrs) for obs in obs_list for nbrs in obs["neighbors"])
    M = len(obs_list[0]["agent_nodes"])
    neighbors = np.zeros((B, M, max_deg), dtype=np.int64)
    nbr_mask = np.zeros((B, M, max_deg), dtype=bool)
    for b, obs in enumerate(obs_list):
        for m, nbrs in enumerate(obs["neighbors"]):
            neighbors[b, m, :len(nbrs)] = nbrs
            nbr_mask[b, m, :len(nbrs)] = True
    batch = {
        "features": torch.as_tensor(
            np.stack([o["features"] for o in obs_list]), dtype=dtype),
        "valid": torch.as_tensor(np.stack([o["valid"] for o in obs_list])),
        "lap_pe": torch.as_tensor(
            np.stack([o["lap_pe"] for o in obs_list]), dtype=dtype),
        "presence": torch.as_tensor(np.stack([o["presence"] for o in obs_list])),
        "dist": torch.as_tensor(np.stack([o["dist"] for o in obs_list]), dtype=dtype),
        "agent_nodes": torch.as_tensor(
            np.stack([o["agent_nodes"] for o in obs_list]).astype(np.int64)),
        "neighbors": torch.as_tensor(neighbors),
        "nbr_mask": torch.as_tensor(nbr_mask),
    }
    if need_adjacency:
        adjs = []
        for obs in obs_list:
            a = np.zeros((K, K))
            for u, nbrs in enumerate(obs["adjacency"]):
                a[u, nbrs] = 1.0
            adjs.append(a)
        batch["adjacency"] = torch.as_tensor(np.stack(adjs), dtype=dtype)
    return batch
