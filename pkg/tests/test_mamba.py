from __future__ import annotations

import math

import pytest
import torch
import torch.nn.functional as F

from conftest import central_difference, rel_err
from mambadm import kernels
from mambadm.errors import ConfigurationError, ShapeError
from mambadm.mamba import MambaBlock, causal_conv, inverse_softplus, selective_params

needs_kernel = pytest.mark.skipif(not kernels.available(), reason="fused kernel not built")


def block(backend="sequential", d=6, N=4, seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    m = MambaBlock(d, N, backend=backend, **kw).to(dtype)
    with torch.no_grad():
        # larger weights than the default init so every path contributes visibly
        for p in (m.W_in, m.W_gate, m.W_B, m.W_C, m.W_out):
            p.normal_(0, 0.5)
        m.W_delta.normal_(0, 0.3)
    return m


def twin(m, backend):
    other = MambaBlock(m.d, m.N, backend=backend, conv_width=m.w, full_delta=m.W_delta.shape[1] > 1,
                       learnable_D=isinstance(m.D, torch.nn.Parameter)).to(m.W_in.dtype)
    other.load_state_dict(m.state_dict())
    return other


# selective_params -------------------------------------------------------------

def test_selective_params_zero_input():
    E, N, T = 5, 3, 4
    u = torch.zeros(2, T, E)
    B, C, delta = selective_params(u, torch.randn(E, N), torch.randn(E, N), torch.randn(E, 1), torch.zeros(E))
    assert torch.count_nonzero(B) == 0 and torch.count_nonzero(C) == 0
    assert torch.allclose(delta, torch.full_like(delta, math.log(2.0)))
    assert abs(math.log(2.0) - 0.693147) < 1e-6


def test_selective_params_delta_lower_bound():
    gen = torch.Generator().manual_seed(4)
    E, T = 8, 50
    u = torch.randn(T, E, generator=gen, dtype=torch.float64)
    W_delta = torch.randn(E, 1, generator=gen, dtype=torch.float64) * 0.3
    bias = torch.full((E,), 5.0, dtype=torch.float64)
    _, _, delta = selective_params(u, torch.zeros(E, 2, dtype=torch.float64), torch.zeros(E, 2, dtype=torch.float64),
                                   W_delta, bias)
    assert (delta > 0).all()
    bound = math.log1p(math.exp(5.0 - W_delta.norm().item() * u.norm(dim=-1).max().item()))
    assert delta.min().item() >= bound
    oracle = [math.log1p(math.exp((u[t] @ W_delta[:, 0]).item() + 5.0)) for t in range(T)]
    assert max(abs(a - b) for a, b in zip(delta[:, 0].tolist(), oracle)) < 1e-12


def test_inverse_softplus_roundtrip():
    y = torch.logspace(-3, -1, 20, dtype=torch.float64)
    assert torch.allclose(F.softplus(inverse_softplus(y)), y, rtol=1e-12)


def test_delta_bias_init_range():
    m = MambaBlock(32, 4)
    dt = F.softplus(m.delta_bias.detach().double())
    assert dt.min() >= 1e-3 * (1 - 1e-5) and dt.max() <= 1e-1 * (1 + 1e-5)


# causal_conv -----------------------------------------------------------------

def test_causal_conv_identity_tap():
    u = torch.randn(2, 9, 3)
    k = torch.zeros(3, 4)
    k[:, -1] = 1.0
    assert torch.equal(causal_conv(u, k), u)


def test_causal_conv_impulse_response():
    w, T = 4, 7
    k = torch.tensor([[0.1, 0.2, 0.3, 0.4]], dtype=torch.float64)
    u = torch.zeros(1, T, 1, dtype=torch.float64)
    u[0, 0, 0] = 1.0
    y = causal_conv(u, k)[0, :, 0]
    expected = [k[0, w - 1 - t].item() if t < w else 0.0 for t in range(T)]
    assert torch.allclose(y, torch.tensor(expected, dtype=torch.float64))


def test_causal_conv_causal():
    u = torch.randn(1, 12, 4, dtype=torch.float64)
    k = torch.randn(4, 4, dtype=torch.float64)
    for j in range(12):
        u2 = u.clone()
        u2[0, j] += 1.0
        assert torch.equal(causal_conv(u, k)[:, :j], causal_conv(u2, k)[:, :j])


def test_causal_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        causal_conv(torch.zeros(1, 3, 5), torch.zeros(4, 2))


# forward -----------------------------------------------------------------------

def test_zero_output_projection():
    m = block()
    with torch.no_grad():
        m.W_out.zero_()
    out = m(torch.randn(3, 10, 6, dtype=torch.float64))
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("other", ["parallel", pytest.param("fused", marks=needs_kernel)])
def test_single_step_backends_agree(other):
    m = block("sequential")
    x = torch.randn(2, 1, 6, dtype=torch.float64)
    ref = m(x)
    got = twin(m, other)(x)
    assert rel_err(ref, got) <= 1e-12


@pytest.mark.parametrize("other", ["parallel", pytest.param("fused", marks=needs_kernel)])
def test_backend_equivalence_float32(other):
    m = block("sequential", d=8, N=6, dtype=torch.float32)
    x = torch.randn(4, 33, 8)
    assert rel_err(m(x), twin(m, other)(x)) <= 1e-5


def test_forward_causal():
    m = block("parallel")
    x = torch.randn(1, 14, 6, dtype=torch.float64)
    base = m(x)
    for j in range(14):
        x2 = x.clone()
        x2[0, j] += 2.0
        out = m(x2)
        assert torch.equal(out[:, :j], base[:, :j])
        assert not torch.allclose(out[:, j:], base[:, j:])


def test_forward_shape_error():
    m = block()
    with pytest.raises(ShapeError):
        m(torch.zeros(2, 5, 7, dtype=torch.float64))
    with pytest.raises(ShapeError):
        m(torch.zeros(5, 6, dtype=torch.float64))


def test_unknown_backend():
    with pytest.raises(ConfigurationError):
        MambaBlock(4, backend="cuda")


def test_learnable_D_and_full_delta():
    m = block(learnable_D=True, full_delta=True)
    assert isinstance(m.D, torch.nn.Parameter) and m.W_delta.shape == (6, 6)
    x = torch.randn(2, 5, 6, dtype=torch.float64)
    with torch.no_grad():
        m.D.fill_(0.7)
    out = m(x)
    with torch.no_grad():
        m.D.zero_()
    assert not torch.allclose(out, m(x))


def test_clamp_A_negative():
    m = block(clamp_A_negative=True)
    with torch.no_grad():
        m.A[0, 0] = 0.5
    assert m.state_matrix().max().item() <= -1e-4
    m2 = block()
    with torch.no_grad():
        m2.A[0, 0] = 0.5
    assert m2.state_matrix()[0, 0].item() == 0.5


@pytest.mark.parametrize("backend", ["sequential", "parallel"])
def test_block_gradients_match_finite_differences(backend):
    m = block(backend, d=4, N=3, learnable_D=True, seed=1)
    with torch.no_grad():
        m.D.normal_(0, 0.5)
    x = torch.randn(2, 9, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 9, 4, dtype=torch.float64)

    def objective():
        return (m(x) * w).sum()

    params = [x] + list(m.parameters())
    m.zero_grad()
    objective().backward()
    numeric = central_difference(objective, params)
    for p, g in zip(params, numeric):
        assert rel_err(p.grad, g) <= 1e-4


@needs_kernel
def test_fused_kernel_gradients_match_reference():
    ref = block("sequential", d=5, N=4, seed=2)
    fused = twin(ref, "fused")
    x = torch.randn(3, 11, 5, dtype=torch.float64)
    w = torch.randn(3, 11, 5, dtype=torch.float64)
    (ref(x) * w).sum().backward()
    (fused(x) * w).sum().backward()
    for (name, p), q in zip(ref.named_parameters(), fused.parameters()):
        assert rel_err(p.grad, q.grad) <= 1e-10, name


@needs_kernel
def test_fused_kernel_state_gradients():
    gen = torch.Generator().manual_seed(8)
    B, T, E, N = 2, 7, 3, 4
    u = torch.randn(B, T, E, generator=gen, dtype=torch.float64, requires_grad=True)
    delta = (torch.rand(B, T, E, generator=gen, dtype=torch.float64) * 0.3 + 1e-3).requires_grad_()
    A = (-torch.rand(E, N, generator=gen, dtype=torch.float64) * 3).requires_grad_()
    Bm = torch.randn(B, T, N, generator=gen, dtype=torch.float64, requires_grad=True)
    Cm = torch.randn(B, T, N, generator=gen, dtype=torch.float64, requires_grad=True)
    h0 = torch.randn(B, E, N, generator=gen, dtype=torch.float64, requires_grad=True)
    wy = torch.randn(B, T, E, generator=gen, dtype=torch.float64)
    wh = torch.randn(B, E, N, generator=gen, dtype=torch.float64)
    params = [u, delta, A, Bm, Cm, h0]

    def objective():
        y, h = kernels.selective_scan(u, delta, A, Bm, Cm, h0)
        return (y * wy).sum() + (h * wh).sum()

    objective().backward()
    numeric = central_difference(objective, params)
    for p, g in zip(params, numeric):
        assert rel_err(p.grad, g) <= 1e-6


# streaming ---------------------------------------------------------------------

@pytest.mark.parametrize("backend", ["sequential", "parallel", pytest.param("fused", marks=needs_kernel)])
def test_streaming_matches_batch(backend):
    m = block(backend, d=6, N=5)
    x = torch.randn(3, 13, 6, dtype=torch.float64)
    full = m(x)
    cache = m.empty_cache(3)
    outs = []
    for t in range(13):
        o, cache = m.step(x[:, t], cache)
        outs.append(o)
    assert cache.ssm.step_index == 13
    assert (torch.stack(outs, 1) - full).abs().max() <= 1e-6
