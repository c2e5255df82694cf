import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from sphereseg.errors import ConfigurationError
from sphereseg.gauge_bias import BiasBasis, FourierBiasTable, bias_gradients, eval_bias
from sphereseg.geometry import build_geodesic_cache
from sphereseg.selftest import fd_relative_error


@pytest.fixture(scope="module")
def cache(mesh2, table2):
    return build_geodesic_cache(mesh2, table2, 3, 16)


def table(rng, H, M, B):
    return FourierBiasTable(torch.as_tensor(rng.standard_normal((H, M + 1, B))),
                            torch.as_tensor(rng.standard_normal((H, M + 1, B))))


def brute_bias(t: FourierBiasTable, c) -> np.ndarray:
    """Direct triple sum over anchors, the six frame rotations and modes."""
    A, Bc = t.A.numpy(), t.Bc.numpy()
    H, M1, _ = A.shape
    L, K, F = c.alpha.shape
    out = np.zeros((L, K, H))
    for i in range(L):
        for k in range(K):
            if not c.valid_mask[i, k]:
                continue
            lo, hi, eta = c.bin_lo[i, k], c.bin_hi[i, k], c.bin_frac[i, k]
            for h in range(H):
                a = A[h, :, lo] * (1 - eta) + A[h, :, hi] * eta
                b = Bc[h, :, lo] * (1 - eta) + Bc[h, :, hi] * eta
                if c.degenerate[i, k]:
                    out[i, k, h] = a[0]
                    continue
                acc = 0.0
                for f in range(F):
                    for r in range(6):
                        for m in range(M1):
                            arg = m * (c.alpha[i, k, f] - 2 * math.pi * r / 6)
                            acc += a[m] * math.cos(arg) + b[m] * math.sin(arg)
                out[i, k, h] = acc / (6 * F)
    return out


def test_matches_brute_force(cache, rng):
    t = table(rng, 2, 7, 16)
    got = eval_bias(t, cache).numpy()
    assert np.abs(got - brute_bias(t, cache)).max() <= 1e-12


def test_order_zero_is_radial(cache, rng):
    t = table(rng, 2, 0, 16)
    got = eval_bias(t, cache).numpy()
    A0 = t.A[:, 0].numpy()
    want = A0[:, cache.bin_lo] * (1 - cache.bin_frac) + A0[:, cache.bin_hi] * cache.bin_frac
    want = np.where(cache.valid_mask[None], want, 0.0)
    assert np.abs(got - np.moveaxis(want, 0, -1)).max() <= 1e-12


@pytest.mark.parametrize("M", [1, 2, 3, 4, 5])
def test_low_orders_cancel(cache, rng, M):
    t = table(rng, 2, M, 16)
    zeroed = FourierBiasTable(t.A.clone(), t.Bc.clone())
    zeroed.A[:, 1:] = 0
    zeroed.Bc[:] = 0
    assert (eval_bias(t, cache) - eval_bias(zeroed, cache)).abs().max() <= 1e-9


def test_order_six_single_mode(cache, rng):
    t = table(rng, 1, 6, 16)
    t.A[:, :6] = 0
    t.Bc[:] = 0
    got = eval_bias(t, cache)[..., 0].numpy()
    A6 = t.A[0, 6].numpy()
    a6 = A6[cache.bin_lo] * (1 - cache.bin_frac) + A6[cache.bin_hi] * cache.bin_frac
    want = a6 * np.cos(6 * cache.alpha).mean(-1)
    free = cache.valid_mask & ~cache.degenerate
    assert np.abs(got[free] - want[free]).max() <= 1e-9
    assert np.abs(got[~free]).max() == 0.0


@given(st.integers(0, 9), st.integers(0, 2**31 - 1))
def test_sixty_degree_shift_invariance(cache, M, seed):
    r = np.random.default_rng(seed)
    t = table(r, 1, M, 16)
    free = cache.valid_mask & ~cache.degenerate
    moved = dataclasses.replace(cache, alpha=np.where(free[..., None], cache.alpha + 2 * np.pi / 6, 0.0))
    assert (eval_bias(t, cache) - eval_bias(t, moved)).abs().max() <= 1e-9


def test_sine_of_mode_zero_is_inert(cache, rng):
    t = table(rng, 2, 6, 16)
    t2 = FourierBiasTable(t.A, t.Bc.clone())
    t2.Bc[:, 0] += 5.0
    assert torch.equal(eval_bias(t, cache), eval_bias(t2, cache))


def test_linearity(cache, rng):
    t1, t2 = table(rng, 2, 6, 16), table(rng, 2, 6, 16)
    mix = FourierBiasTable(0.3 * t1.A - 2 * t2.A, 0.3 * t1.Bc - 2 * t2.Bc)
    lhs = eval_bias(mix, cache)
    rhs = 0.3 * eval_bias(t1, cache) - 2 * eval_bias(t2, cache)
    assert (lhs - rhs).abs().max() <= 1e-9


def test_padding_is_zero_and_bins_checked(cache, rng):
    out = eval_bias(table(rng, 3, 6, 16), cache)
    assert out.shape == (*cache.valid_mask.shape, 3)
    assert out[torch.as_tensor(~cache.valid_mask)].abs().max() == 0
    with pytest.raises(ConfigurationError):
        eval_bias(table(rng, 1, 6, 8), cache)


def test_continuity_in_distance(rng):
    # one slot with distance swept finely: jumps stay within the local slope
    from sphereseg.geometry import radial_bins

    A = rng.standard_normal(16)
    grid = np.linspace(0, 1, 4001)
    vals = []
    for d in grid:
        b0, b1, eta = radial_bins(d, 16)
        vals.append(A[b0] * (1 - eta) + A[b1] * eta)
    steps = np.abs(np.diff(vals))
    slope = np.abs(np.diff(A)).max() * 15
    assert steps.max() <= slope * (grid[1] - grid[0]) + 1e-12


def test_analytic_gradients(cache, rng):
    basis = BiasBasis(cache, 6)
    t = table(rng, 2, 6, 16)
    up = torch.as_tensor(rng.standard_normal((*cache.valid_mask.shape, 2)))
    gA, gB = bias_gradients(t, basis, up)
    A = t.A.clone().requires_grad_(True)
    Bc = t.Bc.clone().requires_grad_(True)
    (eval_bias(FourierBiasTable(A, Bc), basis) * up).sum().backward()
    assert torch.allclose(gA, A.grad, atol=1e-12) and torch.allclose(gB, Bc.grad, atol=1e-12)
    assert fd_relative_error(lambda: (eval_bias(FourierBiasTable(A, Bc), basis) * up).sum(), [A, Bc]) <= 1e-4
    zA, zB = bias_gradients(t, basis, torch.zeros_like(up))
    assert zA.abs().max() == 0 and zB.abs().max() == 0


def test_single_upstream_lands_on_two_bins(cache, rng):
    basis = BiasBasis(cache, 0)
    t = table(rng, 1, 0, 16)
    i, k = 5, 2
    up = torch.zeros((*cache.valid_mask.shape, 1), dtype=torch.float64)
    up[i, k, 0] = 1.0
    gA, _ = bias_gradients(t, basis, up)
    want = np.zeros(16)
    want[cache.bin_lo[i, k]] += 1 - cache.bin_frac[i, k]
    want[cache.bin_hi[i, k]] += cache.bin_frac[i, k]
    assert np.allclose(gA[0, 0].numpy(), want, atol=1e-15)
