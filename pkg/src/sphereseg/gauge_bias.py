"""Gauge-pooled Fourier relative positional bias.

For each (node, neighbor) slot the bias is a truncated Fourier series in the
tangent-plane angle, averaged over six in-plane frame rotations and over the
anchors, with distance-dependent coefficients interpolated from radial bins.

The trigonometric pooling does not depend on parameters, so it is folded into
a per-slot basis once (:func:`pooled_basis`); evaluation is then a linear map
of the coefficient tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .geometry import GeodesicCache

NUM_ROTATIONS = 6


@dataclass
class FourierBiasTable:
    """Cosine (``A``) and sine (``Bc``) coefficients, each ``(heads, order + 1, bins)``."""

    A: torch.Tensor
    Bc: torch.Tensor

    @property
    def heads(self) -> int:
        return self.A.shape[0]

    @property
    def order(self) -> int:
        return self.A.shape[1] - 1

    @property
    def bins(self) -> int:
        return self.A.shape[2]

    @classmethod
    def zeros(cls, heads: int, order: int, bins: int, dtype=torch.float64) -> "FourierBiasTable":
        shape = (heads, order + 1, bins)
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))


def pooled_basis(cache: GeodesicCache, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled trig sums per slot and mode, shape ``(L, K, order + 1)`` each.

    ``cos_basis[i, k, m] = 1/(6F) sum_f sum_r cos(m (alpha_ikf - 2 pi r / 6))``
    and likewise for sine. Degenerate slots (self, vanishing tangent) keep only
    the constant mode; padded slots are all zero.
    """
    m = np.arange(order + 1, dtype=np.float64)
    shifts = 2 * np.pi * np.arange(NUM_ROTATIONS) / NUM_ROTATIONS
    F = cache.num_anchors
    # (L, K, F, R, M)
    arg = m * (cache.alpha[..., None, None] - shifts[:, None])
    cos_b = np.cos(arg).sum(axis=(2, 3)) / (NUM_ROTATIONS * F)
    sin_b = np.sin(arg).sum(axis=(2, 3)) / (NUM_ROTATIONS * F)
    degen = cache.degenerate & cache.valid_mask
    cos_b[degen] = 0.0
    cos_b[degen, 0] = 1.0
    sin_b[degen] = 0.0
    pad = ~cache.valid_mask
    cos_b[pad] = 0.0
    sin_b[pad] = 0.0
    return cos_b, sin_b


class BiasBasis:
    """Torch-side view of a cache plus its pooled basis, ready for evaluation."""

    def __init__(self, cache: GeodesicCache, order: int, dtype=torch.float64):
        cos_b, sin_b = pooled_basis(cache, order)
        self.order = order
        self.bins = cache.num_bins
        self.cos = torch.as_tensor(cos_b, dtype=dtype)
        self.sin = torch.as_tensor(sin_b, dtype=dtype)
        self.b0 = torch.as_tensor(cache.bin_lo, dtype=torch.long)
        self.b1 = torch.as_tensor(cache.bin_hi, dtype=torch.long)
        self.eta = torch.as_tensor(cache.bin_frac, dtype=dtype)


def _interp(coef: torch.Tensor, basis: BiasBasis) -> torch.Tensor:
    # (H, M+1, L, K)
    return coef[:, :, basis.b0] * (1.0 - basis.eta) + coef[:, :, basis.b1] * basis.eta


def eval_bias(table: FourierBiasTable, basis: BiasBasis | GeodesicCache) -> torch.Tensor:
    """Bias tensor of shape ``(L, K, heads)``. Differentiable in the table."""
    if isinstance(basis, GeodesicCache):
        if basis.num_bins != table.bins:
            raise ConfigurationError(f"table has {table.bins} bins, cache has {basis.num_bins}")
        basis = BiasBasis(basis, table.order, dtype=table.A.dtype)
    if basis.bins != table.bins:
        raise ConfigurationError(f"table has {table.bins} bins, cache has {basis.bins}")
    if basis.order != table.order:
        raise ConfigurationError(f"table order {table.order} != basis order {basis.order}")
    out = torch.einsum("hmlk,lkm->lkh", _interp(table.A, basis), basis.cos)
    out = out + torch.einsum("hmlk,lkm->lkh", _interp(table.Bc, basis), basis.sin)
    return out


def bias_gradients(
    table: FourierBiasTable, basis: BiasBasis | GeodesicCache, upstream: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic gradient of ``sum(upstream * eval_bias(table))`` w.r.t. ``(A, Bc)``.

    The bias is linear in the coefficients, so each slot scatters
    ``upstream * basis * (1 - eta)`` into bin ``b0`` and ``upstream * basis * eta``
    into bin ``b1``.
    """
    if isinstance(basis, GeodesicCache):
        basis = BiasBasis(basis, table.order, dtype=table.A.dtype)
    H, M1, B = table.A.shape
    up = upstream.to(table.A.dtype)  # (L, K, H)
    grads = []
    for trig in (basis.cos, basis.sin):
        # (L, K, H, M+1)
        w = up[..., :, None] * trig[:, :, None, :]
        lo = (w * (1.0 - basis.eta)[..., None, None]).reshape(-1, H, M1)
        hi = (w * basis.eta[..., None, None]).reshape(-1, H, M1)
        g = torch.zeros(B, H, M1, dtype=table.A.dtype)
        g.index_add_(0, basis.b0.reshape(-1), lo)
        g.index_add_(0, basis.b1.reshape(-1), hi)
        grads.append(g.permute(1, 2, 0).contiguous())
    return grads[0], grads[1]
