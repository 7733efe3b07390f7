import json

import numpy as np
import pytest
import torch

from compass.config import Config
from compass.errors import ContractViolation, InvalidInputError
from compass.policy_net import PolicyNetwork, collate_obs

torch.set_num_threads(1)


def tiny_net_cfg(**overrides):
    data = {"K": 5, "k_nn": 2, "M": 2, "N": 2, "H": 3, "stride": 1,
            "d_e": 8, "n_heads": 2, "n_spatial_layers": 2, "d_pe": 3}
    data.update(overrides)
    return Config.from_dict(data)


def make_net(dtype=torch.float64, seed=0, **overrides):
    return PolicyNetwork(tiny_net_cfg(**overrides), dtype=dtype, init_seed=seed)


def synth_obs(cfg, rng, fill=None):
    """Synthetic policy inputs on a 5-node ring (no simulator involved)."""
    K, H, d_f = cfg.sim.K, cfg.sim.H, cfg.feature_width
    valid = np.ones(H, dtype=bool)
    if fill is not None:
        valid[:H - fill] = False
    features = rng.random((K, H, d_f))
    features[:, :, 4 * cfg.sim.N] = rng.integers(2, size=(K, H))  # presence column
    adjacency = [sorted(((i - 1) % K, (i + 1) % K)) for i in range(K)]
    presence = np.zeros(K, dtype=np.int64)
    agent_nodes = np.array([0, 2])
    presence[agent_nodes] = 1
    return {
        "features": features,
        "valid": valid,
        "presence": presence,
        "dist": rng.random(K),
        "lap_pe": rng.random((K, cfg.net.d_pe)),
        "agent_nodes": agent_nodes,
        "neighbors": [adjacency[int(v)] for v in agent_nodes],
        "adjacency": adjacency,
    }


# -- numpy oracles (independent re-implementations) ---------------------------


def np_layer_norm(x, g, b, eps=1e-5):
    mean = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * g + b


def np_softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def np_mha(q, k, v, n_heads, mask=None):
    """q: (Tq, d_e), k/v: (Tk, d_e); explicit per-head softmax(QK^T/sqrt(d))V."""
    d_e = q.shape[-1]
    dh = d_e // n_heads
    out = np.zeros((q.shape[0], d_e))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if mask is not None:
            scores = np.where(mask[None, :], scores, -np.inf)
        out[:, sl] = np_softmax(scores) @ v[:, sl]
    return out


def P(net, name):
    return net.params[name].detach().numpy()


def np_target_encoder(net, feats):
    n4 = 4 * net.n_targets
    gp = feats[..., :n4] @ P(net, "enc_gp_w") + P(net, "enc_gp_b")
    coord = feats[..., n4 + 1:n4 + 3] @ P(net, "enc_coord_w") + P(net, "enc_coord_b")
    if net.variant == "no_presence":
        cat = np.concatenate([gp, coord], axis=-1)
    else:
        pres = feats[..., n4:n4 + 1] @ P(net, "enc_presence_w") + P(net, "enc_presence_b")
        cat = np.concatenate([gp, pres, coord], axis=-1)
    return cat @ P(net, "enc_out_w") + P(net, "enc_out_b")


def np_temporal_decoder(net, emb, valid):
    """emb: (K, H, d_e). Mirrors the documented pre-norm decoder layer."""
    mem = emb + P(net, "time_enc")
    out = np.zeros((emb.shape[0], net.d_e))
    for knode in range(emb.shape[0]):
        m = mem[knode]
        q = m[-1:]
        qn = np_layer_norm(q, P(net, "tdec_ln1_g"), P(net, "tdec_ln1_b"))
        mn = np_layer_norm(m, P(net, "tdec_ln1_g"), P(net, "tdec_ln1_b"))
        att = np_mha(qn @ P(net, "tdec_q_w") + P(net, "tdec_q_b"),
                     mn @ P(net, "tdec_k_w") + P(net, "tdec_k_b"),
                     mn @ P(net, "tdec_v_w") + P(net, "tdec_v_b"),
                     net.n_heads, mask=valid)
        h = q + att @ P(net, "tdec_o_w") + P(net, "tdec_o_b")
        hn = np_layer_norm(h, P(net, "tdec_ln2_g"), P(net, "tdec_ln2_b"))
        ff = np.maximum(hn @ P(net, "tdec_ff1_w") + P(net, "tdec_ff1_b"), 0.0)
        h = h + ff @ P(net, "tdec_ff2_w") + P(net, "tdec_ff2_b")
        out[knode] = h[0]
    return out


def np_spatial_encoder(net, e_temp, lap_pe, presence, dist):
    x = e_temp + lap_pe @ P(net, "pe_w") + P(net, "pe_b")
    if net.variant != "no_presence":
        x = x + P(net, "presence_emb")[presence]
    for layer in range(net.cfg.net.n_spatial_layers):
        tag = f"senc{layer}"
        xn = np_layer_norm(x, P(net, f"{tag}_ln1_g"), P(net, f"{tag}_ln1_b"))
        att = np_mha(xn @ P(net, f"{tag}_q_w") + P(net, f"{tag}_q_b"),
                     xn @ P(net, f"{tag}_k_w") + P(net, f"{tag}_k_b"),
                     xn @ P(net, f"{tag}_v_w") + P(net, f"{tag}_v_b"),
                     net.n_heads)
        x = x + att @ P(net, f"{tag}_o_w") + P(net, f"{tag}_o_b")
        xn = np_layer_norm(x, P(net, f"{tag}_ln2_g"), P(net, f"{tag}_ln2_b"))
        ff = np.maximum(xn @ P(net, f"{tag}_ff1_w") + P(net, f"{tag}_ff1_b"), 0.0)
        x = x + ff @ P(net, f"{tag}_ff2_w") + P(net, f"{tag}_ff2_b")
    return np.concatenate([x, dist[:, None]], -1) @ P(net, "fusion_w") + P(net, "fusion_b")


class TestTargetEncoder:
    def test_zero_input_zero_bias_gives_zero(self):
        net = make_net()
        with torch.no_grad():
            for name in list(net.params):
                if name.endswith("_b") and name.startswith("enc"):
                    net.params[name].zero_()
        feats = torch.zeros(5, 3, net.cfg.feature_width, dtype=torch.float64)
        out = net.target_encoder(feats)
        assert torch.all(out == 0)

    def test_gp_block_additivity(self, rng):
        net = make_net()
        d_f = net.cfg.feature_width
        f = rng.random((5, 3, d_f))
        f2 = f.copy()
        f2[..., :8] *= 2.0  # double the GP-stat block (4N = 8 columns)
        gp_only = np.zeros_like(f)
        gp_only[..., :8] = f[..., :8]
        zeros = np.zeros_like(f)
        delta = net.target_encoder(torch.as_tensor(f2)) - net.target_encoder(torch.as_tensor(f))
        ref = net.target_encoder(torch.as_tensor(gp_only)) - net.target_encoder(torch.as_tensor(zeros))
        np.testing.assert_allclose(delta.detach(), ref.detach(), atol=1e-12)

    def test_matches_matmul_oracle(self, rng):
        net = make_net()
        f = rng.random((5, 3, net.cfg.feature_width))
        got = net.target_encoder(torch.as_tensor(f)).detach().numpy()
        np.testing.assert_allclose(got, np_target_encoder(net, f), atol=1e-6)

    def test_nan_input_located(self, rng):
        net = make_net()
        f = rng.random((5, 3, net.cfg.feature_width))
        f[3, 1, 2] = np.nan
        with pytest.raises(InvalidInputError, match="3, 1, 2"):
            net.target_encoder(torch.as_tensor(f))


class TestTemporalDecoder:
    def test_single_valid_slot_weight_is_one(self):
        net = make_net()
        q = torch.randn(1, 1, 8, dtype=torch.float64)
        kv = torch.randn(1, 3, 8, dtype=torch.float64)
        mask = torch.tensor([[False, False, True]])
        _, attn = net._attention(q, kv, kv, mask=mask)
        assert torch.all(attn[..., :2] == 0.0)
        assert torch.all(attn[..., 2] == 1.0)

    def test_masked_weights_exactly_zero_all_heads(self):
        net = make_net()
        q = torch.randn(1, 1, 8, dtype=torch.float64)
        kv = torch.randn(1, 4, 8, dtype=torch.float64)
        mask = torch.tensor([[True, False, True, False]])
        _, attn = net._attention(q, kv, kv, mask=mask)
        assert torch.all(attn[..., 1] == 0.0) and torch.all(attn[..., 3] == 0.0)
        sums = attn.sum(-1)
        np.testing.assert_allclose(sums.numpy(), 1.0, atol=1e-12)

    def test_matches_hand_rolled_oracle(self, rng):
        net = make_net()
        emb = rng.random((5, 3, 8))
        valid = np.array([False, True, True])
        got = net.temporal_decoder(torch.as_tensor(emb), torch.as_tensor(valid))
        expected = np_temporal_decoder(net, emb, valid)
        np.testing.assert_allclose(got.detach().numpy(), expected, atol=1e-6)

    def test_all_masked_rejected(self, rng):
        net = make_net()
        emb = rng.random((5, 3, 8))
        with pytest.raises(InvalidInputError):
            net.temporal_decoder(torch.as_tensor(emb), torch.zeros(3, dtype=torch.bool))


class TestSpatialEncoder:
    def test_single_node_softmax_degenerate(self, rng):
        net = make_net()
        e = rng.random((1, 8))
        pe = rng.random((1, 3))
        out = net.spatial_encoder(torch.as_tensor(e), torch.as_tensor(pe),
                                  torch.tensor([1]), torch.tensor([0.3]))
        expected = np_spatial_encoder(net, e, pe, np.array([1]), np.array([0.3]))
        np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-10)

    def test_matches_hand_rolled_oracle(self, rng):
        net = make_net()
        e = rng.random((3, 8))
        pe = rng.random((3, 3))
        presence = np.array([1, 0, 1])
        dist = rng.random(3)
        out = net.spatial_encoder(torch.as_tensor(e), torch.as_tensor(pe),
                                  torch.as_tensor(presence), torch.as_tensor(dist))
        expected = np_spatial_encoder(net, e, pe, presence, dist)
        np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-5)

    def test_node_permutation_equivariance(self, rng):
        net = make_net()
        K = 5
        e = rng.random((K, 8))
        pe = rng.random((K, 3))
        presence = rng.integers(2, size=K)
        dist = rng.random(K)
        perm = rng.permutation(K)
        out = net.spatial_encoder(torch.as_tensor(e), torch.as_tensor(pe),
                                  torch.as_tensor(presence), torch.as_tensor(dist))
        out_p = net.spatial_encoder(torch.as_tensor(e[perm]), torch.as_tensor(pe[perm]),
                                    torch.as_tensor(presence[perm]),
                                    torch.as_tensor(dist[perm]))
        np.testing.assert_allclose(out_p.detach().numpy(),
                                   out.detach().numpy()[perm], atol=1e-10)

    def test_lap_pe_width_mismatch(self, rng):
        net = make_net()
        with pytest.raises(InvalidInputError):
            net.spatial_encoder(torch.zeros(5, 8, dtype=torch.float64),
                                torch.zeros(5, 7, dtype=torch.float64),
                                torch.zeros(5, dtype=torch.long),
                                torch.zeros(5, dtype=torch.float64))


class TestActor:
    def test_single_neighbor_prob_one(self, rng):
        net = make_net()
        e = torch.as_tensor(rng.random((5, 8)))
        logp = net.actor_logits(e, 0, [3])
        assert logp.item() == 0.0

    def test_identical_features_uniform(self):
        net = make_net()
        e = torch.ones(5, 8, dtype=torch.float64)
        logp = net.actor_logits(e, 0, [1, 2, 3])
        np.testing.assert_allclose(np.exp(logp.detach().numpy()), 1 / 3, atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        net = make_net()
        e = rng.random((5, 8))
        nbrs = [1, 3, 4]
        logp = net.actor_logits(torch.as_tensor(e), 2, nbrs).detach().numpy()
        q = e[2] @ P(net, "actor_q_w")
        scores = np.array([e[v] @ P(net, "actor_k_w") @ q for v in nbrs]) / np.sqrt(8)
        expected = scores - np.log(np.exp(scores - scores.max()).sum()) - scores.max()
        np.testing.assert_allclose(logp, expected, atol=1e-8)
        np.testing.assert_allclose(np.exp(logp).sum(), 1.0, atol=1e-9)

    def test_empty_neighbors_rejected(self, rng):
        net = make_net()
        with pytest.raises(ContractViolation):
            net.actor_logits(torch.as_tensor(rng.random((5, 8))), 0, [])

    def test_batch_matches_single_and_masks_pad(self, rng):
        net = make_net()
        e = rng.random((1, 5, 8))
        nbrs = torch.tensor([[[1, 2, 0], [3, 0, 0]]])
        mask = torch.tensor([[[True, True, False], [True, False, False]]])
        agent_nodes = torch.tensor([[0, 2]])
        logp = net.actor_logits_batch(torch.as_tensor(e), agent_nodes, nbrs, mask)
        single0 = net.actor_logits(torch.as_tensor(e[0]), 0, [1, 2])
        np.testing.assert_allclose(logp[0, 0, :2].detach(), single0.detach(), atol=1e-12)
        assert np.exp(logp[0, 0, 2].item()) == 0.0
        assert logp[0, 1, 0].item() == 0.0


class TestCritic:
    def test_zero_weights_give_bias(self, rng):
        net = make_net()
        with torch.no_grad():
            net.params["critic_l1_w"].zero_()
            net.params["critic_l1_b"].zero_()
            net.params["critic_l2_w"].zero_()
            net.params["critic_l2_b"].fill_(0.7)
        e = torch.as_tensor(rng.random((5, 8)))
        v = net.critic_value(e, [0, 2])
        np.testing.assert_allclose(v.detach().numpy(), 0.7, atol=1e-15)

    def test_deterministic(self, rng):
        net = make_net()
        e = torch.as_tensor(rng.random((5, 8)))
        v1 = net.critic_value(e, [1, 3]).detach().numpy()
        v2 = net.critic_value(e, [1, 3]).detach().numpy()
        np.testing.assert_array_equal(v1, v2)

    def test_matches_matmul_oracle(self, rng):
        net = make_net()
        e = rng.random((5, 8))
        got = net.critic_value(torch.as_tensor(e), [0, 2]).detach().numpy()
        flat = np.concatenate([e[0], e[2]])
        hidden = np.tanh(flat @ P(net, "critic_l1_w") + P(net, "critic_l1_b"))
        expected = hidden @ P(net, "critic_l2_w") + P(net, "critic_l2_b")
        np.testing.assert_allclose(got, expected[0], atol=1e-6)

    def test_wrong_agent_count(self, rng):
        net = make_net()
        with pytest.raises(InvalidInputError):
            net.critic_value(torch.as_tensor(rng.random((5, 8))), [0, 1, 2])

    def test_value_shared_across_team(self, rng):
        net = make_net()
        v = net.critic_value(torch.as_tensor(rng.random((5, 8))), [0, 2])
        assert v[0].item() == v[1].item()

    def test_node_relabel_invariance(self, rng):
        net = make_net()
        e = rng.random((5, 8))
        perm = rng.permutation(5)
        inv = np.argsort(perm)
        v1 = net.critic_value(torch.as_tensor(e), [0, 2]).detach().numpy()
        v2 = net.critic_value(torch.as_tensor(e[inv]), [int(perm[0]), int(perm[2])])
        np.testing.assert_allclose(v1, v2.detach().numpy(), atol=1e-12)

    def test_decentralized_per_agent_values(self, rng):
        net = make_net(critic="decentralized")
        e = torch.as_tensor(rng.random((5, 8)))
        v = net.critic_value(e, [0, 2])
        assert v.shape == (2,)
        assert v[0].item() != v[1].item()


class TestAblations:
    def test_no_spatial_equals_neighbor_mean_oracle(self, rng):
        cfg = tiny_net_cfg(variant="no_spatial")
        net = PolicyNetwork(cfg, dtype=torch.float64, init_seed=1)
        obs = synth_obs(cfg, rng)
        K = cfg.sim.K
        e = rng.random((K, 8))
        adj = np.zeros((K, K))
        for u, nbrs in enumerate(obs["adjacency"]):
            adj[u, nbrs] = 1.0
        out = net.spatial_encoder(torch.as_tensor(e), torch.as_tensor(obs["lap_pe"]),
                                  torch.as_tensor(obs["presence"]),
                                  torch.as_tensor(obs["dist"]),
                                  adjacency=torch.as_tensor(adj))
        x = e + obs["lap_pe"] @ P(net, "pe_w") + P(net, "pe_b")
        x = x + P(net, "presence_emb")[obs["presence"]]
        pooled = adj @ x / adj.sum(1, keepdims=True)
        expected = (np.concatenate([pooled, obs["dist"][:, None]], -1)
                    @ P(net, "fusion_w") + P(net, "fusion_b"))
        np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-10)
        assert not any(n.startswith("senc") for n in net.params)

    def test_no_temporal_uniform_average(self, rng):
        cfg = tiny_net_cfg(variant="no_temporal")
        net = PolicyNetwork(cfg, dtype=torch.float64, init_seed=1)
        emb = rng.random((5, 3, 8))
        valid = np.array([False, True, True])
        out = net.temporal_decoder(torch.as_tensor(emb), torch.as_tensor(valid))
        np.testing.assert_allclose(out.detach().numpy(), emb[:, 1:].mean(1), atol=1e-12)
        assert "time_enc" not in net.params

    def test_no_presence_ignores_presence_inputs(self, rng):
        cfg = tiny_net_cfg(variant="no_presence")
        net = PolicyNetwork(cfg, dtype=torch.float64, init_seed=1)
        obs = synth_obs(cfg, rng)
        obs2 = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in obs.items()}
        obs2["features"][:, :, 4 * cfg.sim.N] = 1 - obs2["features"][:, :, 4 * cfg.sim.N]
        obs2["presence"] = 1 - obs2["presence"]
        lp1, v1 = net.act(obs)
        lp2, v2 = net.act(obs2)
        np.testing.assert_array_equal(lp1, lp2)
        np.testing.assert_array_equal(v1, v2)
        assert "presence_emb" not in net.params


def full_loss(net, obs):
    batch = collate_obs([obs], dtype=net.dtype,
                        need_adjacency=net.variant == "no_spatial")
    logp, values = net.forward(batch)
    safe = logp.masked_fill(~batch["nbr_mask"], 0.0)
    return safe.sum() + values.sum()


class TestGradients:
    def test_finite_difference_spot_check(self, rng):
        net = make_net(seed=5)
        obs = synth_obs(net.cfg, rng)
        loss = full_loss(net, obs)
        grads = net.gradients(loss)
        h = 1e-4
        check = {"actor_q_w": [(0, 0), (3, 5)], "tdec_ln1_g": [(2,), (7,)],
                 "enc_gp_w": [(1, 1), (6, 3)], "critic_l1_w": [(0, 0)],
                 "fusion_w": [(8, 1)]}
        for name, entries in check.items():
            p = net.params[name]
            for idx in entries:
                with torch.no_grad():
                    orig = p[idx].item()
                    p[idx] = orig + h
                up = full_loss(net, obs).item()
                with torch.no_grad():
                    p[idx] = orig - h
                down = full_loss(net, obs).item()
                with torch.no_grad():
                    p[idx] = orig
                fd = (up - down) / (2 * h)
                an = grads[name][idx].item()
                assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd)), (name, idx)

    def test_unused_presence_row_zero_grad(self, rng):
        net = make_net(seed=6)
        obs = synth_obs(net.cfg, rng)
        obs["presence"][:] = 0  # flag value 1 never used
        loss = full_loss(net, obs)
        grads = net.gradients(loss)
        assert torch.all(grads["presence_emb"][1] == 0.0)
        assert torch.any(grads["presence_emb"][0] != 0.0)

    def test_loss_scaling_linearity(self, rng):
        net = make_net(seed=7)
        obs = synth_obs(net.cfg, rng)
        g1 = net.gradients(full_loss(net, obs))
        g2 = net.gradients(2.0 * full_loss(net, obs))
        for name in g1:
            np.testing.assert_allclose(g2[name].numpy(), 2.0 * g1[name].numpy(),
                                       atol=1e-12)

    def test_backward_before_forward_rejected(self):
        net = make_net()
        with pytest.raises(ContractViolation):
            net.gradients(torch.tensor(1.0))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = PolicyNetwork(tiny_net_cfg(), dtype=torch.float32, init_seed=8)
        path = str(tmp_path / "net.ckpt")
        net.save_checkpoint(path)
        before = {n: p.detach().clone() for n, p in net.params.items()}
        with torch.no_grad():
            for p in net.params.values():
                p.add_(1.0)
        net.load_checkpoint(path)
        for n, p in net.params.items():
            np.testing.assert_array_equal(p.detach().numpy(), before[n].numpy())

    def test_manifest_structure(self, tmp_path):
        net = PolicyNetwork(tiny_net_cfg(), dtype=torch.float32, init_seed=9)
        path = str(tmp_path / "net.ckpt")
        net.save_checkpoint(path)
        with open(path, "rb") as fh:
            manifest = json.loads(fh.readline())
            blob = fh.read()
        assert manifest["format_version"] == 1
        offsets = [a["byte_offset"] for a in manifest["arrays"]]
        assert offsets == sorted(offsets)
        total = sum(int(np.prod(a["shape"])) * 4 for a in manifest["arrays"])
        assert len(blob) == total
        assert [a["name"] for a in manifest["arrays"]] == list(net.params.keys())

    def test_unknown_version_rejected(self, tmp_path):
        net = PolicyNetwork(tiny_net_cfg(), dtype=torch.float32, init_seed=9)
        path = str(tmp_path / "net.ckpt")
        net.save_checkpoint(path)
        with open(path, "rb") as fh:
            manifest = json.loads(fh.readline())
            blob = fh.read()
        manifest["format_version"] = 99
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest).encode() + b"\n")
            fh.write(blob)
        with pytest.raises(InvalidInputError, match="version"):
            net.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        net = PolicyNetwork(tiny_net_cfg(), dtype=torch.float32, init_seed=9)
        other = PolicyNetwork(tiny_net_cfg(d_e=16), dtype=torch.float32, init_seed=9)
        path = str(tmp_path / "net.ckpt")
        other.save_checkpoint(path)
        with pytest.raises(InvalidInputError):
            net.load_checkpoint(path)


def test_forward_probabilities_sum_to_one_float32(rng):
    cfg = tiny_net_cfg()
    net = PolicyNetwork(cfg, dtype=torch.float32, init_seed=11)
    obs = synth_obs(cfg, rng)
    logp, _ = net.act(obs)
    for m, nbrs in enumerate(obs["neighbors"]):
        assert abs(np.exp(logp[m, :len(nbrs)]).sum() - 1.0) <= 1e-9
