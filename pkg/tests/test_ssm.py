import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from rawmamba.errors import EvaluationError, ParameterError
from rawmamba.ssm import (
    BidirectionalMamba,
    DiscreteSsm,
    SelectiveSSM,
    SsmParams,
    apply_kernel,
    selective_scan,
    ssm_kernel,
    ssm_scan_sequential,
    zoh_discretize,
)
from rawmamba.tensor import grad_check

from conftest import randn


def _params(rng, N, delta=None):
    return SsmParams(
        A=-rng.uniform(0.05, 2.0, N),
        B=rng.standard_normal(N),
        C=rng.standard_normal(N),
        delta=rng.uniform(0.01, 1.0) if delta is None else delta,
    )


def test_zoh_scalar_closed_form():
    d = zoh_discretize(SsmParams(np.array([-1.0]), np.array([1.0]), np.array([1.0]), math.log(2)))
    assert abs(d.A_bar[0] - 0.5) < 1e-12
    assert abs(d.B_bar[0] - 0.5) < 1e-12


def test_zoh_small_delta_limit():
    d = zoh_discretize(SsmParams(np.array([-1.0, -3.0]), np.array([1.0, 2.0]), np.ones(2), 1e-12))
    np.testing.assert_allclose(d.A_bar, 1.0, atol=1e-11)
    np.testing.assert_allclose(d.B_bar, 0.0, atol=1e-11)


@pytest.mark.parametrize("dA", [1e-3, -1e-3, 5e-4, -5e-4])
def test_zoh_series_branch_matches_general_branch(dA):
    p = SsmParams(np.array([dA]), np.array([1.3]), np.array([1.0]), 1.0)
    general = zoh_discretize(p, small=1e-4)
    series = zoh_discretize(p, small=1.0)
    assert abs(general.B_bar[0] - series.B_bar[0]) < 1e-10


def test_zoh_rejects_bad_timescale():
    for delta in (0.0, -1.0, float("nan")):
        with pytest.raises(ParameterError):
            zoh_discretize(SsmParams(np.array([-1.0]), np.array([1.0]), np.array([1.0]), delta))


def test_zoh_first_order_consistency():
    A = np.array([-0.5, -1.0, -2.5])
    errs = []
    for k in range(8):
        delta = 0.2 / 2 ** k
        d = zoh_discretize(SsmParams(A, np.ones(3), np.ones(3), delta))
        errs.append(np.abs((d.A_bar - 1) / delta - A).max())
    for big, small in zip(errs, errs[1:]):
        assert small <= 0.6 * big


def test_sequential_scan_examples(rng):
    d = DiscreteSsm(np.zeros(1), np.ones(1), np.ones(1))
    x = rng.standard_normal(7)
    np.testing.assert_array_equal(ssm_scan_sequential(d, x), x)
    d = zoh_discretize(_params(rng, 3))
    np.testing.assert_array_equal(ssm_scan_sequential(d, np.zeros(5)), np.zeros(5))


def test_sequential_scan_hand_unrolled(rng):
    d = zoh_discretize(_params(rng, 2))
    x = rng.standard_normal(4)
    a, b, c = d.A_bar, d.B_bar, d.C
    h1 = b * x[0]
    h2 = a * h1 + b * x[1]
    h3 = a * h2 + b * x[2]
    h4 = a * h3 + b * x[3]
    expected = [c @ h1, c @ h2, c @ h3, c @ h4]
    np.testing.assert_allclose(ssm_scan_sequential(d, x), expected, rtol=1e-14, atol=1e-15)


def test_kernel_examples():
    d = DiscreteSsm(np.array([0.5]), np.array([0.5]), np.array([1.0]))
    np.testing.assert_allclose(ssm_kernel(d, 3), [0.5, 0.25, 0.125], atol=1e-15)
    np.testing.assert_allclose(ssm_kernel(d, 1), [0.5], atol=1e-15)


def test_kernel_matches_scan_against_direct_convolution(rng):
    for _ in range(20):
        N, L = int(rng.integers(1, 9)), int(rng.integers(1, 65))
        d = zoh_discretize(_params(rng, N))
        x = rng.standard_normal(L)
        K = ssm_kernel(d, L)
        direct = np.array([sum(K[j] * x[t - j] for j in range(t + 1)) for t in range(L)])
        np.testing.assert_allclose(apply_kernel(K, x), direct, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(ssm_scan_sequential(d, x), direct, rtol=1e-6, atol=1e-12)


def test_causality(rng):
    d = zoh_discretize(_params(rng, 4))
    x = rng.standard_normal(20)
    x2 = x.copy()
    x2[12:] = rng.standard_normal(8)
    np.testing.assert_array_equal(ssm_scan_sequential(d, x)[:12], ssm_scan_sequential(d, x2)[:12])
    K = ssm_kernel(d, 20)
    np.testing.assert_allclose(apply_kernel(K, x)[:12], apply_kernel(K, x2)[:12], rtol=0, atol=1e-14)


def test_state_bound_on_long_sequence(rng):
    p = _params(rng, 6, delta=0.3)
    d = zoh_discretize(p)
    x = rng.uniform(-5, 5, 5000)
    h0 = rng.standard_normal(6)
    h = h0.copy()
    bound = np.abs(h0).max() + np.abs(d.B_bar).max() * np.abs(x).max() / (1 - d.A_bar.max())
    for xt in x:
        h = d.A_bar * h + d.B_bar * xt
        assert np.isfinite(h).all()
        assert np.abs(h).max() <= bound + 1e-9


# --- selective scan -------------------------------------------------------


def _selective_inputs(gen, n=2, L=6, D=3, N=4):
    u = randn(n, L, D, gen=gen, requires_grad=True)
    delta = (torch.rand(n, L, D, dtype=torch.float64, generator=gen) * 0.8 + 0.05).requires_grad_()
    A = (-torch.rand(D, N, dtype=torch.float64, generator=gen) * 2 - 0.1).requires_grad_()
    B = randn(n, L, N, gen=gen, requires_grad=True)
    C = randn(n, L, N, gen=gen, requires_grad=True)
    return u, delta, A, B, C


def test_selective_constant_projections_reduce_to_sequential(rng):
    N, L = 4, 12
    p = _params(rng, N, delta=0.37)
    x = rng.standard_normal(L)
    ref = ssm_scan_sequential(zoh_discretize(p), x)
    u = torch.from_numpy(x).reshape(1, L, 1)
    delta = torch.full((1, L, 1), p.delta, dtype=torch.float64)
    A = torch.from_numpy(p.A).reshape(1, N)
    B = torch.from_numpy(p.B).expand(1, L, N)
    C = torch.from_numpy(p.C).expand(1, L, N)
    for method in ("fast", "reference"):
        y = selective_scan(u, delta, A, B, C, method=method)
        np.testing.assert_allclose(y.reshape(-1).numpy(), ref, rtol=1e-12, atol=1e-12)


def test_selective_zero_readout(gen):
    u, delta, A, B, C = _selective_inputs(gen)
    y = selective_scan(u, delta, A, B, torch.zeros_like(C))
    assert bool((y == 0).all())


def test_selective_fast_matches_reference_loop(gen):
    u, delta, A, B, C = _selective_inputs(gen)
    fast = selective_scan(u, delta, A, B, C)
    ref = selective_scan(u, delta, A, B, C, method="reference")
    assert torch.allclose(fast, ref, rtol=1e-12, atol=1e-13)
    w = torch.randn(fast.shape, dtype=torch.float64, generator=gen)
    g_fast = torch.autograd.grad((fast * w).sum(), [u, delta, A, B, C])
    g_ref = torch.autograd.grad((ref * w).sum(), [u, delta, A, B, C])
    for a, b in zip(g_fast, g_ref):
        assert torch.allclose(a, b, rtol=1e-9, atol=1e-11)


def test_selective_tiny_timescale_uses_series(gen):
    u, delta, A, B, C = _selective_inputs(gen)
    tiny = torch.full_like(delta, 1e-7).requires_grad_()
    fast = selective_scan(u, tiny, A, B, C)
    ref = selective_scan(u, tiny, A, B, C, method="reference")
    assert torch.allclose(fast, ref, rtol=1e-12, atol=1e-18)
    assert grad_check(lambda: selective_scan(u, tiny, A, B, C).sin().sum(), [u, A, B, C], h=1e-6).passed


def test_selective_gradients_finite_differences(gen):
    u, delta, A, B, C = _selective_inputs(gen)
    rep = grad_check(lambda: selective_scan(u, delta, A, B, C).sin().sum(), [u, delta, A, B, C])
    assert rep.passed, rep.errors


def test_selective_rejects_nonfinite_timescale(gen):
    u, delta, A, B, C = _selective_inputs(gen)
    bad = delta.detach().clone()
    bad[0, 0, 0] = float("inf")
    with pytest.raises(EvaluationError):
        selective_scan(u, bad, A, B, C)


def test_selective_float32_path():
    u = torch.randn(1, 10, 2)
    y = selective_scan(u, torch.full_like(u, 0.1), -torch.ones(2, 3), torch.randn(1, 10, 3), torch.randn(1, 10, 3))
    assert y.dtype == torch.float32 and y.shape == u.shape


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 10), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_selective_fast_equals_reference_property(n, L, D, N, seed):
    g = torch.Generator().manual_seed(seed)
    u, delta, A, B, C = _selective_inputs(g, n, L, D, N)
    fast = selective_scan(u, delta, A, B, C)
    ref = selective_scan(u, delta, A, B, C, method="reference")
    assert torch.allclose(fast, ref, rtol=1e-11, atol=1e-12)


# --- Mamba blocks ----------------------------------------------------------


def _block(d_model=4, d_state=3, seed=0, zero_init=False):
    torch.manual_seed(seed)
    return BidirectionalMamba(d_model, d_state, expand=2, d_conv=3, zero_init=zero_init).double()


def test_bidirectional_zero_backward_equals_forward_only():
    m = _block()
    with torch.no_grad():
        for p in m.backward_ssm.parameters():
            p.zero_()
    x = torch.randn(2, 7, 4, dtype=torch.float64)
    u, z = m.in_proj(x).chunk(2, dim=-1)
    expected = m.out_proj(m.forward_ssm(u) * F.silu(z))
    assert torch.allclose(m(x), expected, rtol=0, atol=1e-15)


def test_bidirectional_tied_weights_reverse_symmetry():
    m = _block()
    m.backward_ssm.load_state_dict(m.forward_ssm.state_dict())
    x = torch.randn(2, 9, 4, dtype=torch.float64)
    assert torch.allclose(m(x.flip(1)), m(x).flip(1), atol=1e-13)


def test_bidirectional_single_token_closed_form():
    m = _block()
    x = torch.randn(1, 1, 4, dtype=torch.float64)
    u, z = m.in_proj(x).chunk(2, dim=-1)

    def one_step(s: SelectiveSSM, u):
        xc = F.silu(u * s.conv_weight[:, -1] + s.conv_bias)  # only the last causal tap sees the token
        dt, B, C = torch.split(s.x_proj(xc), [s.dt_rank, s.d_state, s.d_state], dim=-1)
        delta = F.softplus(s.dt_proj(dt))
        dA = delta.unsqueeze(-1) * s.A
        B_bar = torch.expm1(dA) / dA * delta.unsqueeze(-1) * B.unsqueeze(-2)
        h = B_bar * xc.unsqueeze(-1)
        return (h * C.unsqueeze(-2)).sum(-1) + s.D * xc

    y = one_step(m.forward_ssm, u) + one_step(m.backward_ssm, u)
    expected = m.out_proj(y * F.silu(z))
    assert torch.allclose(m(x), expected, atol=1e-13)


def test_bidirectional_zero_init_contributes_nothing():
    m = _block(zero_init=True)
    x = torch.randn(2, 5, 4, dtype=torch.float64)
    assert bool((m(x) == 0).all())


def test_bidirectional_fast_matches_reference_and_gradients():
    m = _block()
    x = torch.randn(1, 5, 4, dtype=torch.float64, requires_grad=True)
    assert torch.allclose(m(x), m(x, method="reference"), atol=1e-12)
    params = [x, m.in_proj.weight, m.forward_ssm.A_log, m.backward_ssm.dt_proj.weight, m.out_proj.weight]
    rep = grad_check(lambda: m(x).pow(2).sum(), params)
    assert rep.passed, rep.errors


def test_discretized_evolution_in_unit_interval():
    s = SelectiveSSM(8, 4)
    assert bool((s.A < 0).all())
    A_bar = torch.exp(0.5 * s.A)
    assert bool(((A_bar > 0) & (A_bar < 1)).all())
