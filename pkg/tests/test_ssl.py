import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from assl.backbones import BackboneSpec, efficientnet
from assl.ssl_methods import (MoCoV3, ProjectionHead, SslConfig, SwAV, build_ssl_model, interleave,
                              momentum_schedule, momentum_update, mocov3_loss, nt_xent_loss,
                              simclr_step, sinkhorn_normalize, swapped_prediction_loss, swav_loss,
                              swav_step)
from oracles import info_nce_brute, nt_xent_brute

TINY_STAGES = [(1, 3, 1, 32, 8, 1), (2, 3, 2, 8, 16, 1)]


def tiny_backbone(seed=0):
    torch.manual_seed(seed)
    return efficientnet(BackboneSpec("effnet-b0"), TINY_STAGES)


def test_config_validation():
    with pytest.raises(ValueError, match="simclr"):
        SslConfig(method="byol")
    with pytest.raises(ValueError):
        SslConfig(temperature=0)
    with pytest.raises(ValueError):
        SslConfig(momentum=1.5)
    with pytest.raises(ValueError):
        SslConfig(method="swav", n_prototypes=1)


def test_projection_head_dims():
    head = ProjectionHead(16, 32, 7)
    assert head(torch.randn(4, 16)).shape == (4, 7)


# -- NT-Xent -----------------------------------------------------------------

def test_nt_xent_single_pair_is_zero():
    assert nt_xent_loss(torch.randn(2, 5, dtype=torch.float64), 0.1).item() == 0.0


def test_nt_xent_two_pair_hand_case():
    z = torch.tensor([[1.0, 0], [1, 0], [0, 1], [0, 1]], dtype=torch.float64)
    got = nt_xent_loss(z, 0.5).item()
    assert abs(got - nt_xent_brute(z.numpy(), 0.5)) < 1e-12
    # every anchor: positive sim 1, negatives {0, 0} -> -log(e^2 / (e^2 + 2))
    assert abs(got - math.log1p(2 * math.exp(-2))) < 1e-12


@given(st.integers(1, 4), st.integers(1, 6), st.sampled_from([0.1, 0.5]), st.integers(0, 2**31))
@settings(max_examples=100)
def test_nt_xent_matches_brute_force(n, d, tau, seed):
    z = np.random.default_rng(seed).normal(size=(2 * n, d))
    z[np.linalg.norm(z, axis=1) < 1e-3] += 1.0
    got = nt_xent_loss(torch.tensor(z), tau).item()
    assert abs(got - nt_xent_brute(z, tau)) < 1e-6
    assert got >= 0


def test_nt_xent_pair_permutation_invariant():
    z = torch.randn(6, 4, dtype=torch.float64)
    pairs = z.view(3, 2, 4)[torch.tensor([2, 0, 1])].reshape(6, 4)
    assert abs(nt_xent_loss(z, 0.2).item() - nt_xent_loss(pairs, 0.2).item()) < 1e-12


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_nt_xent_row_rescaling_invariant(seed, c):
    z = torch.tensor(np.random.default_rng(seed).normal(size=(6, 4)))
    scaled = z.clone()
    scaled[seed % 6] *= c
    assert abs(nt_xent_loss(z, 0.1).item() - nt_xent_loss(scaled, 0.1).item()) < 1e-9


def test_nt_xent_rejects_bad_input():
    with pytest.raises(ValueError):
        nt_xent_loss(torch.randn(4, 3), 0.0)
    with pytest.raises(ValueError):
        nt_xent_loss(torch.randn(3, 3), 0.1)


def test_interleave():
    a, b = torch.tensor([[1.0], [2.0]]), torch.tensor([[10.0], [20.0]])
    assert interleave(a, b).flatten().tolist() == [1, 10, 2, 20]


# -- simclr_step -------------------------------------------------------------

def test_simclr_step_single_pair_zero_loss():
    backbone = tiny_backbone()
    head = ProjectionHead(backbone.embed_dim, 16, 8)
    x = torch.randn(1, 3, 32, 32)
    loss, grads = simclr_step(backbone, head, (x, x.clone()), 0.1)
    assert loss.item() == 0.0
    assert grads and all(torch.isfinite(g).all() for g in grads.values())


def test_simclr_step_temperature_domain():
    backbone = tiny_backbone()
    head = ProjectionHead(backbone.embed_dim, 16, 8)
    torch.manual_seed(1)
    views = (torch.randn(4, 3, 32, 32), torch.randn(4, 3, 32, 32))
    a, _ = simclr_step(backbone, head, views, 0.1)
    b, _ = simclr_step(backbone, head, views, 0.2)
    assert a.item() != b.item()
    assert a.item() >= 0 and b.item() >= 0 and math.isfinite(b.item())
    assert any(k.startswith("backbone.") for k in _) and any(k.startswith("head.") for k in _)


def test_simclr_loss_descends_on_fixed_images():
    from assl.data import AugmentRecipe, batch_views, synth_roof_sample
    images = np.stack([synth_roof_sample(i % 4, 32, i).pixels for i in range(32)])
    backbone = tiny_backbone(2)
    model = build_ssl_model(backbone, SslConfig(temperature=0.2, proj_hidden=32, proj_out=16))
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    losses = []
    for step in range(50):
        v1, v2 = batch_views(images, range(32), step, 0, AugmentRecipe(), (32, 32))
        opt.zero_grad()
        loss = model.loss(torch.from_numpy(v1), torch.from_numpy(v2))
        loss.backward()
        opt.step()
        losses.append(loss.item())
    blocks = np.array(losses).reshape(5, 10).mean(1)
    assert blocks[-1] < blocks[0]
    assert np.polyfit(np.arange(5), blocks, 1)[0] < 0


# -- momentum ----------------------------------------------------------------

def _params(*vals):
    return {f"p{i}": torch.tensor(v, dtype=torch.float64) for i, v in enumerate(vals)}


def test_momentum_update_examples():
    q = _params([0.3, -2.0], [[1.0]])
    k = _params([1.0, 5.0], [[-1.0]])
    before = {n: v.clone() for n, v in k.items()}
    momentum_update(q, k, 1.0)
    assert all(torch.equal(k[n], before[n]) for n in k)
    momentum_update(q, k, 0.0)
    assert all(torch.equal(k[n], q[n]) for n in k)
    k = _params(1.0)
    momentum_update(_params(0.0), k, 0.99)
    assert k["p0"].item() == 0.99


def test_momentum_update_mismatch():
    with pytest.raises(ValueError):
        momentum_update(_params(1.0), {"other": torch.tensor(1.0)}, 0.5)
    with pytest.raises(ValueError):
        momentum_update(_params([1.0, 2.0]), _params([1.0]), 0.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.integers(0, 2**31), st.floats(0, 1))
def test_momentum_update_is_convex_combination(keys, seed, m):
    k = torch.tensor(keys, dtype=torch.float64)
    q = torch.tensor(np.random.default_rng(seed).uniform(-1e6, 1e6, len(keys)))
    new = momentum_update({"w": q}, {"w": k.clone()}, m)["w"]
    assert torch.all(new >= torch.minimum(k, q)) and torch.all(new <= torch.maximum(k, q))


def test_momentum_schedule_ramps_to_one():
    assert momentum_schedule(0.99, 0, 100) == pytest.approx(0.99)
    assert momentum_schedule(0.99, 100, 100) == pytest.approx(1.0)
    vals = [momentum_schedule(0.99, s, 100) for s in range(101)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


# -- MoCo v3 -----------------------------------------------------------------

def test_mocov3_single_sample_zero():
    assert mocov3_loss(torch.randn(1, 4), torch.randn(1, 4), 0.2).item() == 0.0


def test_mocov3_orthogonal_pairs_brute_force():
    q = torch.tensor([[1.0, 0, 0], [0, 1, 0]], dtype=torch.float64)
    k = torch.tensor([[0.6, 0.8, 0], [0, 0, 1]], dtype=torch.float64)
    expected = 0.5 * (info_nce_brute(q.numpy(), k.numpy(), 1.0) + info_nce_brute(k.numpy(), q.numpy(), 1.0))
    assert abs(mocov3_loss(q, k, 1.0).item() - expected) < 1e-12


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_mocov3_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    q, k = torch.tensor(rng.normal(size=(n, 5))), torch.tensor(rng.normal(size=(n, 5)))
    assert abs(mocov3_loss(q, k, 0.2).item() - mocov3_loss(k, q, 0.2).item()) < 1e-12
    assert abs(mocov3_loss(q, k, 0.2).item() - 0.5 * (info_nce_brute(q.numpy(), k.numpy(), 0.2)
                                                      + info_nce_brute(k.numpy(), q.numpy(), 0.2))) < 1e-9


def test_mocov3_rejects_bad_temperature():
    with pytest.raises(ValueError):
        mocov3_loss(torch.randn(2, 3), torch.randn(2, 3), -1)


def test_mocov3_model_key_encoder_moves_slowly():
    model = MoCoV3(tiny_backbone(), SslConfig("mocov3", proj_hidden=16, proj_out=8, momentum=0.9))
    query, key = model.key_params()
    assert all(torch.equal(query[n], key[n]) for n in query)
    with torch.no_grad():
        for p in model.backbone.parameters():
            p.add_(1.0)
    before = {n: v.clone() for n, v in key.items()}
    model.after_step(0, 10)
    n = "backbone.stem.conv.weight"
    assert torch.allclose(key[n], before[n] + 0.1, atol=1e-6)
    loss = model.loss(torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32))
    loss.backward()
    assert all(p.grad is None for p in model.key_backbone.parameters())


# -- Sinkhorn / SwAV ---------------------------------------------------------

def test_sinkhorn_uniform_input_exact():
    q = sinkhorn_normalize(torch.zeros(8, 4, dtype=torch.float64), 3, 0.05)
    assert torch.all(q == 1 / 32)


def test_sinkhorn_hand_case_one_iteration():
    s = torch.tensor([[0.1, 0.3], [0.2, -0.1]], dtype=torch.float64)
    eps = 0.5
    e = [[math.exp(float(v) / eps) for v in row] for row in s]
    col = [e[0][j] + e[1][j] for j in range(2)]
    a = [[e[i][j] / col[j] / 2 for j in range(2)] for i in range(2)]
    expected = [[a[i][j] / (a[i][0] + a[i][1]) / 2 for j in range(2)] for i in range(2)]
    assert torch.allclose(sinkhorn_normalize(s, 1, eps), torch.tensor(expected, dtype=torch.float64), atol=1e-15)


def test_sinkhorn_converges_with_iterations():
    torch.manual_seed(0)
    s = torch.rand(32, 16, dtype=torch.float64)
    q = sinkhorn_normalize(s, 100, 0.05)
    assert (q.sum(0) - 1 / 16).abs().max() < 1e-6 and (q.sum(1) - 1 / 32).abs().max() < 1e-12
    assert torch.all(q > 0)


@given(st.integers(0, 2**31), st.floats(0.05, 1.0))
@settings(max_examples=30)
def test_sinkhorn_marginal_error_monotone(seed, eps):
    s = torch.tensor(np.random.default_rng(seed).random((12, 5)))
    errors = []
    for it in range(1, 12):
        q = sinkhorn_normalize(s, it, eps)
        errors.append(float((q.sum(0) - 1 / 5).abs().sum() + (q.sum(1) - 1 / 12).abs().sum()))
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))


def test_sinkhorn_rejects_bad_params():
    with pytest.raises(ValueError):
        sinkhorn_normalize(torch.zeros(2, 2), 0)
    with pytest.raises(ValueError):
        sinkhorn_normalize(torch.zeros(2, 2), 3, 0.0)


def test_sinkhorn_no_overflow():
    q = sinkhorn_normalize(torch.tensor([[1e4, -1e4], [0.0, 3.0]]), 3, 0.05)
    assert torch.isfinite(q).all()


def test_swapped_prediction_with_codes_equals_entropy():
    codes = sinkhorn_normalize(torch.randn(6, 4, dtype=torch.float64), 3, 0.5) * 6
    entropy = -(codes * codes.log()).sum(1).mean()
    loss = swapped_prediction_loss(codes, codes, codes.log(), codes.log())
    assert abs(loss.item() - entropy.item()) < 1e-12


def test_swav_loss_hand_case():
    s1 = torch.tensor([[0.9, 0.1], [0.2, 0.7]], dtype=torch.float64)
    s2 = torch.tensor([[0.8, -0.3], [0.4, 0.5]], dtype=torch.float64)
    tau, eps = 0.1, 0.5

    def codes(s):
        e = [[math.exp(float(v) / eps) for v in row] for row in s]
        for _ in range(3):
            col = [e[0][j] + e[1][j] for j in range(2)]
            e = [[e[i][j] / col[j] / 2 for j in range(2)] for i in range(2)]
            e = [[e[i][j] / (e[i][0] + e[i][1]) / 2 for j in range(2)] for i in range(2)]
        return [[2 * v for v in row] for row in e]

    def log_softmax(row):
        m = [float(v) / tau for v in row]
        z = math.log(sum(math.exp(v) for v in m))
        return [v - z for v in m]

    q1, q2 = codes(s1), codes(s2)
    ce = 0.0
    for i in range(2):
        lp1, lp2 = log_softmax(s1[i]), log_softmax(s2[i])
        ce -= sum(q1[i][j] * lp2[j] for j in range(2)) + sum(q2[i][j] * lp1[j] for j in range(2))
    expected = ce / 4
    assert abs(swav_loss(s1, s2, tau, 3, eps).item() - expected) < 1e-12


def test_swav_step_renormalizes_prototypes():
    backbone = tiny_backbone()
    head = ProjectionHead(backbone.embed_dim, 16, 8)
    protos = torch.nn.Linear(8, 5, bias=False)
    with torch.no_grad():
        protos.weight.mul_(3.0)
    loss, grads = swav_step(backbone, head, protos, (torch.randn(4, 3, 32, 32), torch.randn(4, 3, 32, 32)), 0.1)
    assert loss.item() >= 0 and "prototypes.weight" in grads
    torch.optim.SGD(protos.parameters(), lr=1.0).step()
    model = SwAV(backbone, SslConfig("swav", proj_hidden=16, proj_out=8, n_prototypes=5))
    model.prototypes = protos
    model.after_step(0, 1)
    assert torch.allclose(protos.weight.norm(dim=1), torch.ones(5), atol=1e-6)


@pytest.mark.parametrize("method", ["simclr", "mocov3", "swav"])
def test_every_method_produces_finite_loss(method):
    model = build_ssl_model(tiny_backbone(), SslConfig(method, proj_hidden=16, proj_out=8, n_prototypes=6))
    loss = model.loss(torch.randn(4, 3, 32, 32), torch.randn(4, 3, 32, 32))
    loss.backward()
    assert math.isfinite(loss.item()) and loss.item() >= 0
