import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from assl.attention import (CBAM, CbamSpec, apply_cbam, cbam_param_count, channel_attention,
                            spatial_attention)
from oracles import (cbam_loops, channel_gate_loops, finite_difference_grad, max_relative_error,
                     spatial_gate_loops)

torch.set_default_dtype(torch.float32)


def _cbam(channels, r=2, k=3, seed=0):
    torch.manual_seed(seed)
    return CBAM(channels, CbamSpec(r, k)).double()


def test_spec_validation():
    with pytest.raises(ValueError):
        CbamSpec(reduction=0)
    with pytest.raises(ValueError):
        CbamSpec(kernel_size=4)


def test_zero_mlp_gives_half_gate():
    x = torch.randn(2, 8, 3, 3)
    gate = channel_attention(x, torch.zeros(4, 8), torch.zeros(8, 4))
    assert gate.shape == (2, 8, 1, 1) and torch.all(gate == 0.5)


def test_constant_channels_pool_identity():
    fc1, fc2 = torch.randn(2, 4, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64)
    v = torch.randn(4, dtype=torch.float64)
    x = v[None, :, None, None].expand(1, 4, 3, 3)
    mlp = torch.relu(v @ fc1.T) @ fc2.T
    assert torch.allclose(channel_attention(x, fc1, fc2).flatten(), torch.sigmoid(2 * mlp), atol=1e-12)


def test_channel_gate_matches_scalar_reference():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2, 2))
    fc1, fc2 = rng.normal(size=(2, 4)) * 0.3, rng.normal(size=(4, 2)) * 0.3
    got = channel_attention(torch.tensor(x[None]), torch.tensor(fc1), torch.tensor(fc2)).flatten().numpy()
    assert np.max(np.abs(got - channel_gate_loops(x, fc1, fc2))) < 1e-6


def test_spatial_gate_examples():
    x = torch.randn(1, 3, 5, 6)
    for k in (3, 7):
        gate = spatial_attention(x, torch.zeros(1, 2, k, k), torch.zeros(1))
        assert gate.shape == (1, 1, 5, 6) and torch.all(gate == 0.5)


def test_spatial_gate_matches_scalar_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4, 4))
    w, b = rng.normal(size=(1, 2, 3, 3)) * 0.2, np.array([0.1])
    got = spatial_attention(torch.tensor(x[None]), torch.tensor(w), torch.tensor(b))[0, 0].numpy()
    assert np.max(np.abs(got - spatial_gate_loops(x, w, b))) < 1e-6


def test_cbam_hand_case_matches_composed_oracle():
    x = np.array([[[0.5, -1.0], [2.0, 0.25]], [[-0.3, 0.8], [0.1, -2.0]]])
    fc1 = np.array([[0.4, -0.2]])
    fc2 = np.array([[0.3], [-0.5]])
    w = np.zeros((1, 2, 3, 3))
    w[0, 0, 1, 1], w[0, 1, 1, 1], w[0, 0, 0, 1], w[0, 1, 2, 2] = 0.7, -0.4, 0.2, 0.1
    b = np.array([0.05])
    params = {"channel.fc1.weight": torch.tensor(fc1), "channel.fc2.weight": torch.tensor(fc2),
              "spatial.conv.weight": torch.tensor(w), "spatial.conv.bias": torch.tensor(b)}
    got = apply_cbam(torch.tensor(x[None]), CbamSpec(2, 3), params)[0].numpy()
    assert np.max(np.abs(got - cbam_loops(x, fc1, fc2, w, b))) < 1e-6


def test_module_and_functional_agree():
    m = _cbam(8)
    x = torch.randn(2, 8, 5, 5, dtype=torch.float64)
    params = dict(m.state_dict())
    assert torch.equal(apply_cbam(x, CbamSpec(2, 3), m), apply_cbam(x, CbamSpec(2, 3), params))


class _OnesGates(CBAM):
    """Test harness: both gates bypassed to constant ones."""

    def forward(self, x):
        x = torch.ones_like(x[:, :, :1, :1]) * x
        return torch.ones_like(x[:, :1]) * x


def test_identity_gates_preserve_input_bitwise():
    x = torch.randn(2, 4, 3, 3)
    assert torch.equal(_OnesGates(4, CbamSpec(2, 3))(x), x)


@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 12), st.integers(1, 7), st.sampled_from([1, 3, 7]))
def test_shape_preserved_and_contraction(seed, n, c, hw, k):
    torch.manual_seed(seed)
    m = CBAM(c, CbamSpec(reduction=4, kernel_size=k)).double()
    x = torch.randn(n, c, hw, hw, dtype=torch.float64) * 3
    out = m(x)
    assert out.shape == x.shape
    assert torch.all(out.abs() <= x.abs())


def test_param_count_formula():
    for c, r, k in ((384, 16, 7), (64, 4, 3), (5, 16, 7)):
        m = CBAM(c, CbamSpec(r, k))
        assert sum(p.numel() for p in m.parameters()) == cbam_param_count(c, r, k)
    assert cbam_param_count(384) == 2 * 384 * 24 + 2 * 49 + 1 == 18531


def test_cbam_gradient_check_float64():
    m = _cbam(6, r=2, k=3, seed=3)
    x0 = np.random.default_rng(3).normal(size=(1, 6, 4, 4))
    proj = np.random.default_rng(4).normal(size=(1, 6, 4, 4))

    def f(x):
        with torch.no_grad():
            return float((m(torch.tensor(x)) * torch.tensor(proj)).sum())

    x = torch.tensor(x0, requires_grad=True)
    (m(x) * torch.tensor(proj)).sum().backward()
    assert max_relative_error(x.grad.numpy(), finite_difference_grad(f, x0), floor=1e-6) < 1e-4

    # parameter gradients
    for name, p in m.named_parameters():
        p0 = p.detach().numpy().copy()

        def fp(v, p=p):
            with torch.no_grad():
                p.copy_(torch.tensor(v))
                out = float((m(torch.tensor(x0)) * torch.tensor(proj)).sum())
                p.copy_(torch.tensor(p0))
            return out

        m.zero_grad()
        (m(torch.tensor(x0)) * torch.tensor(proj)).sum().backward()
        assert max_relative_error(p.grad.numpy(), finite_difference_grad(fp, p0), floor=1e-6) < 1e-4, name
