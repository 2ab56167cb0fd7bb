import itertools
import math

import numpy as np
import pytest

from lightdp import tensor as T
from lightdp.denoiser import Denoiser, DenoiserConfig, count_params
from lightdp.edm import EDMCoeffs
from lightdp.pruner import (GateLogits, PruningReport, PruningScheme, check_masks, enumerate_masks, gumbel_sample,
                            importance_scores, init_gate_logits, layer_importance, normalized_scores,
                            sample_layer_gates, select_and_prune, select_masks, svd_importance, tau_at)
from lightdp.tensor import ContractError, Tensor
from lightdp.train import TrainConfig, train_gates


def brute_force_masks(n, m):
    """All m-bit strings with popcount n, in the order 'first positions kept first'."""
    rows = [[(b >> (m - 1 - i)) & 1 for i in range(m)] for b in range(2**m)]
    rows = [r for r in rows if sum(r) == n]
    return sorted(rows, reverse=True)


def test_enumerate_three_of_four_listing():
    assert enumerate_masks(3, 4).tolist() == [[1, 1, 1, 0], [1, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]]


def test_enumerate_one_of_two():
    assert enumerate_masks(1, 2).tolist() == [[1, 0], [0, 1]]


@pytest.mark.parametrize("m", range(2, 7))
def test_enumerate_matches_bit_brute_force(m):
    for n in range(1, m):
        got = enumerate_masks(n, m).tolist()
        assert got == brute_force_masks(n, m)
        assert len(got) == math.comb(m, n)


@pytest.mark.parametrize("n,m", [(2, 2), (3, 2)])
def test_enumerate_rejects_n_ge_m(n, m):
    with pytest.raises(ContractError):
        enumerate_masks(n, m)


def test_scheme_checks():
    with pytest.raises(ContractError):
        PruningScheme(0, 2)
    with pytest.raises(ContractError):
        PruningScheme(1, 3).groups(8)
    s = PruningScheme.parse("1:4")
    assert s.groups(8) == [[0, 1, 2, 3], [4, 5, 6, 7]] and s.retained_depth(8) == 2


# -- importance -------------------------------------------------------------------
def test_svd_importance_exact_rank(rng):
    w = rng.standard_normal((12, 3)) @ rng.standard_normal((3, 10))
    assert svd_importance(w, 3) <= 1e-6 * np.linalg.norm(w)


def test_svd_importance_k_zero(rng):
    w = rng.standard_normal((5, 7))
    assert math.isclose(svd_importance(w, 0), np.linalg.norm(w))


def test_svd_importance_eckart_young(rng):
    w = rng.standard_normal((8, 8))
    s = np.linalg.svd(w, compute_uv=False)
    assert math.isclose(svd_importance(w, 4), math.sqrt(np.sum(s[4:] ** 2)), rel_tol=1e-9)


def test_svd_importance_k_too_large(rng):
    with pytest.raises(ContractError):
        svd_importance(rng.standard_normal((3, 5)), 4)


def _block(rng, d=8, f=16, scale=1.0):
    return {"attn.wq": rng.standard_normal((d, d)) * scale, "attn.wk": rng.standard_normal((d, d)) * scale,
            "attn.wv": rng.standard_normal((d, d)) * scale, "ffn.w1": rng.standard_normal((d, f)) * scale,
            "ffn.w2": rng.standard_normal((f, d)) * scale}


def test_layer_importance_zero_block():
    blk = {k: np.zeros(v.shape) for k, v in _block(np.random.default_rng(0)).items()}
    assert layer_importance(blk, 2) == 0.0


def test_layer_importance_homogeneous(rng):
    blk = _block(rng)
    doubled = {k: 2 * v for k, v in blk.items()}
    assert math.isclose(layer_importance(doubled, 2), 2 * layer_importance(blk, 2), rel_tol=1e-10)


def test_layer_importance_sum_of_oracle(rng):
    blk = _block(rng)
    ref = sum(math.sqrt(np.sum(np.linalg.svd(w, compute_uv=False)[2:] ** 2)) for w in blk.values())
    assert math.isclose(layer_importance(blk, 2), ref, rel_tol=1e-9)


def test_importance_scale_equivariance(small_net):
    base = importance_scores(small_net, k=4)
    scaled = small_net.copy()
    for k, p in scaled.params.items():
        if k.startswith("blocks."):
            p.data = p.data * 3.0
    got = importance_scores(scaled, k=4)
    assert np.allclose(got, 3 * base, rtol=1e-5)
    assert np.array_equal(np.argsort(got), np.argsort(base))
    assert np.allclose(normalized_scores(got), normalized_scores(base), rtol=1e-5)


def test_normalized_scores():
    p = normalized_scores([4, 3, 2, 1])
    assert np.allclose(p, [0.4, 0.3, 0.2, 0.1]) and math.isclose(p.sum(), 1.0)


# -- gate logits ---------------------------------------------------------------------
def test_init_uniform_importance_gives_uniform_logits():
    g = init_gate_logits([1, 1, 1, 1, 1, 1, 1, 1], PruningScheme(3, 4))
    for t in g.logits:
        assert np.allclose(t.data, 0.0)
        assert t.shape == (4,)


def test_init_dominant_layer():
    g = init_gate_logits([10, 1, 1, 1], PruningScheme(3, 4), dtype=np.float64)
    lg = g.logits[0].data
    cands = enumerate_masks(3, 4)
    with_0 = lg[cands[:, 0] == 1]
    assert np.allclose(with_0, with_0[0]) and with_0[0] > lg[cands[:, 0] == 0].max()
    assert select_masks(g).tolist()[0] == 1


def test_init_hand_table():
    # p = [.4,.3,.2,.1]; masks 1110,1101,1011,0111 sum to .9,.8,.7,.6; mean .75
    g = init_gate_logits([4, 3, 2, 1], PruningScheme(3, 4), dtype=np.float64)
    assert np.allclose(g.logits[0].data, [0.15, 0.05, -0.05, -0.15])


def test_gumbel_zero_noise_small_tau():
    lg = Tensor(np.array([0.1, 0.9, 0.3]))
    relaxed, hard = gumbel_sample(lg, 1e-3, noise=np.zeros(3))
    assert hard.data.tolist() == [0, 1, 0]
    assert np.allclose(relaxed.data, [0, 1, 0], atol=1e-12)


def test_gumbel_relaxed_sums_to_one(rng):
    for _ in range(20):
        relaxed, hard = gumbel_sample(Tensor(rng.normal(size=6)), rng.uniform(0.1, 4), rng)
        assert math.isclose(float(relaxed.data.sum()), 1.0, rel_tol=1e-6)
        assert hard.data.sum() == 1


def test_gumbel_equal_logits_fifty_fifty():
    rng = np.random.default_rng(0)
    lg = Tensor(np.array([0.7, 0.7]))
    n = 10_000
    picks = sum(int(np.argmax(gumbel_sample(lg, 1.0, rng)[1].data)) for _ in range(n))
    assert abs(picks - n / 2) <= 3 * math.sqrt(n * 0.25)


def test_gumbel_rejects_bad_tau():
    with pytest.raises(ContractError):
        gumbel_sample(Tensor(np.zeros(2)), 0.0)


def test_straight_through_logit_gradient_fd(rng):
    # gradient to logits equals the gradient through the relaxed weights, frozen Gumbel draw
    lg = rng.normal(size=4)
    noise = rng.gumbel(size=4)
    w = rng.normal(size=4)
    tau = 0.7
    t = Tensor(lg.copy(), requires_grad=True)
    with T.Tape() as tape:
        _, hard = gumbel_sample(t, tau, noise=noise)
        loss = T.tsum(T.mul(hard, Tensor(w)))
    tape.backward(loss)

    def relaxed_loss():
        z = (lg + noise) / tau
        e = np.exp(z - z.max())
        return float((e / e.sum()) @ w)

    assert np.allclose(t.grad, T.finite_difference_grad(relaxed_loss, lg), atol=1e-8)


def test_layer_gates_follow_candidate(rng):
    g = init_gate_logits([1, 2, 3, 4, 5, 6, 7, 8], PruningScheme(1, 4), dtype=np.float64)
    for _ in range(10):
        m = [float(x.data) for x in sample_layer_gates(g, 0.5, rng)]
        check_masks(m, g.scheme)


def test_tie_breaks_to_first_candidate():
    g = GateLogits(PruningScheme(2, 4), [Tensor(np.zeros(6)), Tensor(np.array([0, 1, 1, 0, 0, 0.0]))])
    assert select_masks(g).tolist() == [1, 1, 0, 0, 1, 0, 1, 0]


def test_check_masks_rejects_wrong_popcount():
    with pytest.raises(ContractError):
        check_masks([1, 1, 0, 1], PruningScheme(1, 2))


def test_tau_schedule():
    assert tau_at(0, 10) == 4.0 and math.isclose(tau_at(9, 10), 0.1)
    assert all(tau_at(i, 10) > tau_at(i + 1, 10) for i in range(9))


def test_select_and_prune_equivalence(small_net, rng):
    cfg = small_net.cfg
    g = GateLogits(PruningScheme(1, 2), [Tensor(np.array([0.0, 1.0])), Tensor(np.array([2.0, 1.0]))])
    pruned, masks = select_and_prune(small_net, g)
    assert masks.tolist() == [0, 1, 1, 0] and pruned.cfg.depth == 2
    assert count_params(cfg) - count_params(pruned.cfg) == 2 * (count_params(cfg) - count_params(cfg, [0, 1, 1, 1]))
    x = rng.standard_normal((5, cfg.horizon, 2)).astype(np.float32)
    obs = rng.uniform(-1, 1, (5, cfg.obs_flat)).astype(np.float32)
    assert np.array_equal(pruned.forward(x, 0.1, pruned.encode(obs)).data,
                          small_net.forward(x, 0.1, small_net.encode(obs), masks).data)


def test_depth8_scheme_1_2_drops_four_blocks():
    cfg = DenoiserConfig(depth=8, hidden=16, heads=2, horizon=4, obs_dim=5)
    net = Denoiser(cfg)
    g = init_gate_logits(importance_scores(net, 4), PruningScheme(1, 2))
    pruned, masks = select_and_prune(net, g)
    per_block = count_params(cfg) - count_params(cfg, [0] + [1] * 7)
    assert pruned.cfg.depth == 4
    assert count_params(pruned.cfg) == count_params(cfg) - 4 * per_block


def _toy_data(cfg, rng, n=64):
    obs = rng.uniform(-1, 1, (n, cfg.obs_flat)).astype(np.float32)
    act = np.tanh(obs[:, :cfg.horizon * 2].reshape(n, cfg.horizon, 2) * 2).astype(np.float32)
    return obs, act


def test_train_gates_degenerate_scheme_keeps_all(rng):
    cfg = DenoiserConfig(depth=2, hidden=8, heads=2, horizon=4, obs_dim=5)
    obs, act = _toy_data(cfg, rng)
    res = train_gates(Denoiser(cfg), EDMCoeffs(), obs, act, PruningScheme(2, 2),
                      TrainConfig(epochs=3, steps_per_epoch=2, batch_size=16))
    assert res.masks.tolist() == [1, 1] and res.pruned.cfg.depth == 2


def test_train_gates_updates_logits(rng):
    cfg = DenoiserConfig(depth=4, hidden=8, heads=2, horizon=4, obs_dim=5)
    obs, act = _toy_data(cfg, rng)
    net = Denoiser(cfg, seed=1)
    net.params["out.w"].data = rng.normal(0, 0.3, net.params["out.w"].shape).astype(np.float32)
    res = train_gates(net, EDMCoeffs(), obs, act, PruningScheme(1, 2),
                      TrainConfig(epochs=3, steps_per_epoch=3, batch_size=16))
    first = res.history[0]["logits"]
    last = res.history[1]["logits"]
    assert first != last
    check_masks(res.masks, PruningScheme(1, 2))


def test_train_gates_uses_given_initial_logits(rng):
    cfg = DenoiserConfig(depth=4, hidden=8, heads=2, horizon=4, obs_dim=5)
    obs, act = _toy_data(cfg, rng)
    scheme = PruningScheme(1, 2)
    # importance would favor other blocks; a large logit margin and zero gate lr pins the choice
    given = GateLogits(scheme, [Tensor(np.array([-50.0, 50.0], np.float32), requires_grad=True),
                                Tensor(np.array([50.0, -50.0], np.float32), requires_grad=True)])
    res = train_gates(Denoiser(cfg, seed=1), EDMCoeffs(), obs, act, scheme,
                      TrainConfig(epochs=3, steps_per_epoch=2, batch_size=16), gate_lr=0.0, gates=given)
    assert res.gates is given
    assert res.masks.tolist() == [0, 1, 1, 0]


def test_pruning_report(small_net):
    g = init_gate_logits(importance_scores(small_net, 4), PruningScheme(1, 2))
    _, masks = select_and_prune(small_net, g)
    rep = PruningReport.build(small_net, g, importance_scores(small_net, 4), masks, steps=4)
    assert rep.params_after == count_params(small_net.cfg, masks)
    assert "scheme 1:2" in rep.to_text() and '"masks"' in rep.to_json()
